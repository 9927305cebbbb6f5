"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive records a node onto the tape of its inputs. Node creation
order is a topological order of the graph, so the backward pass simply walks
the tape in reverse. Only what the compression models need is provided:
dense layers, leaky ReLU, (log-)softmax and a handful of elementwise ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "GradientTape",
    "DenseLayerParams",
    "MlpSpec",
    "init_mlp",
    "mlp_forward",
    "linear",
    "leaky_relu",
    "log_softmax",
    "logsumexp",
    "softmax",
    "exp",
    "log",
    "square",
    "sum",
    "mean",
    "concat",
    "reshape",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward value contains NaN or Inf."""


def _checked(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(value) -> np.ndarray:
    """float64 array, except that extended-precision input keeps its dtype."""
    if isinstance(value, (np.ndarray, np.generic)) and value.dtype == np.longdouble:
        return np.asarray(value)
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array, optionally recorded on a :class:`GradientTape`."""

    __slots__ = ("value", "grad", "tape", "_parents", "_backward")

    def __init__(self, value, tape=None, parents=(), backward=None, op="tensor"):
        self.value = _checked(_as_array(value), op)
        self.grad = None
        self.tape = tape
        self._parents = parents
        self._backward = backward
        if tape is not None:
            tape._record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        traced = "traced" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {traced})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Tensor(value, op=op)
    return Tensor(value, tape=tape, parents=tuple(parents), backward=backward, op=op)


class GradientTape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def _record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def watch(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise KeyError(f"parameter {name!r} already watched")
        leaf = Tensor(value, tape=self, op=f"leaf {name}")
        self.leaves[name] = leaf
        return leaf

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(name, value) for name, value in params.items()}

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        """Return d(output)/d(leaf) for every watched leaf.

        Leaves that do not reach ``output`` get an all-zero gradient.
        """
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or parent.tape is not self:
                    continue
                g = _unbroadcast(g, parent.shape)
                parent.grad = g if parent.grad is None else parent.grad + g
        return {
            name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self.leaves.items()
        }


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def square(a: Tensor) -> Tensor:
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av <= 0):
        raise NonFiniteError("log of non-positive value")
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, backward, "concat")


def linear(x: Tensor, weights, bias) -> Tensor:
    """``x @ weights.T + bias`` for x of shape [B, in] and weights [out, in]."""
    x, w, b = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    xv, wv = x.value, w.value

    def backward(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _node(xv @ wv.T + b.value, (x, w, b), backward, "linear")


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky-ReLU slope must lie in (0, 1), got {slope}")
    x = _as_tensor(x)
    xv = x.value

    def backward(g):
        scale = (xv > 0).astype(np.float64)
        scale *= 1.0 - slope
        scale += slope
        return (g * scale,)

    return _node(np.maximum(xv, slope * xv), (x,), backward, "leaky_relu")


def log_softmax(logits, axis: int = -1) -> Tensor:
    """Log-probabilities along ``axis``, stabilized by max-subtraction."""
    logits = _as_tensor(logits)
    if logits.value.size == 0 or logits.shape[axis] == 0:
        raise ValueError("log_softmax of an empty input")
    z = logits.value - logits.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (logits,), backward, "log_softmax")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    top = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - top)
    total = e.sum(axis=axis, keepdims=True)
    out = (top + np.log(total)).squeeze(axis)
    weights = e / total

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _node(out, (a,), backward, "logsumexp")


def softmax(logits, axis: int = -1) -> Tensor:
    logits = _as_tensor(logits)
    z = logits.value - logits.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (logits,), backward, "softmax")


# ---------------------------------------------------------------------------
# dense networks


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    output_width: int
    hidden_widths: tuple[int, ...] = (100, 100)
    negative_slope: float = 0.01

    def __post_init__(self):
        widths = (self.input_width, *self.hidden_widths, self.output_width)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if not 0.0 < self.negative_slope < 1.0:
            raise ValueError(f"negative_slope must lie in (0, 1), got {self.negative_slope}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_width, *self.hidden_widths, self.output_width)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) per layer."""
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]


@dataclass
class DenseLayerParams:
    weights: object  # ndarray or Tensor, shape [out, in]
    bias: object  # ndarray or Tensor, shape [out]


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> list[DenseLayerParams]:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for fan_out, fan_in in spec.layer_shapes():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(
            DenseLayerParams(
                weights=rng.uniform(-limit, limit, size=(fan_out, fan_in)),
                bias=np.zeros(fan_out),
            )
        )
    return layers


def _shape_of(p) -> tuple[int, ...]:
    return p.shape if isinstance(p, Tensor) else np.shape(p)


def mlp_forward(spec: MlpSpec, params: Sequence[DenseLayerParams], x) -> Tensor:
    """Dense stack with leaky ReLU after every layer except the last.

    ``x`` has shape [B, input_width]; the result has shape [B, output_width].
    """
    shapes = spec.layer_shapes()
    if len(params) != len(shapes):
        raise ValueError(f"expected {len(shapes)} layers, got {len(params)}")
    h = _as_tensor(x)
    if h.value.ndim != 2 or h.shape[1] != spec.input_width:
        raise ValueError(f"layer 0: expected input [B, {spec.input_width}], got {h.shape}")
    last = len(shapes) - 1
    for i, ((n_out, n_in), layer) in enumerate(zip(shapes, params)):
        if _shape_of(layer.weights) != (n_out, n_in) or _shape_of(layer.bias) != (n_out,):
            raise ValueError(
                f"layer {i}: expected weights {(n_out, n_in)} and bias {(n_out,)}, "
                f"got {_shape_of(layer.weights)} and {_shape_of(layer.bias)}"
            )
        h = linear(h, layer.weights, layer.bias)
        if i < last:
            h = leaky_relu(h, spec.negative_slope)
    return h


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    *,
    analytic: Mapping[str, np.ndarray] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    numeric_dtype=np.float64,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` receives leaves keyed like ``params`` and must be a
    deterministic function of them (any noise frozen). Relative error uses the
    denominator ``max(|a|, |b|, 1e-12)``. With ``max_coords`` a random subset
    of coordinates is compared instead of all of them.

    The analytic side always runs in float64. ``numeric_dtype=np.longdouble``
    evaluates the finite differences in extended precision: in float64 their
    cancellation error is about ``ulp(loss) / epsilon``, which swamps
    gradient components much smaller than ``1e-4 * |loss|``.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    if np.dtype(numeric_dtype) not in (np.dtype(np.float64), np.dtype(np.longdouble)):
        raise ValueError(f"numeric_dtype must be float64 or longdouble, got {numeric_dtype}")
    base_params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    params = {k: np.array(v, dtype=numeric_dtype) for k, v in params.items()}

    def value(values):
        return loss_fn({k: Tensor(v) for k, v in values.items()}).value.reshape(())

    tape = GradientTape()
    out = loss_fn(tape.watch_all(base_params))
    if loss_fn({k: Tensor(v) for k, v in base_params.items()}).value != out.value:
        raise ValueError("loss_fn is not deterministic under frozen noise")
    if analytic is None:
        analytic = tape.backward(out)

    coords = [(name, idx) for name, v in params.items() for idx in np.ndindex(v.shape)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    eps = np.asarray(epsilon, dtype=numeric_dtype)
    worst = 0.0
    for name, idx in coords:
        original = params[name][idx]
        params[name][idx] = original + eps
        f_plus = value(params)
        params[name][idx] = original - eps
        f_minus = value(params)
        params[name][idx] = original
        numeric = float((f_plus - f_minus) / (2 * eps))
        a = float(np.asarray(analytic[name])[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
