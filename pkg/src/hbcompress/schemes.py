"""The joint, marginal and conditional learned Heegard-Berger compressors.

Each model is a bag of named float64 arrays plus the network layout. All
probabilistic models are categoricals with softmax probabilities; discrete
conditioning variables enter networks as one-hot vectors concatenated with
the real inputs. Rates inside losses are in nats.

Parameter groups (``<net>.<layer>.weight`` / ``.bias`` or ``<prior>.logits``):

=========== ===================== ============================== ==========================
kind        encoder(s)            entropy model(s)               decoders
=========== ===================== ============================== ==========================
joint       enc: x -> v           prior: free logits q(v)        dec1: v, dec2: (v, y)
marginal    enc_w: x -> w,        prior_w: free logits q(w),     dec1: w, dec2: (u, w, y)
            enc_u: (w, x) -> u    prior_u: w -> q(u|w)
conditional as marginal           prior_u: (w, y) -> q(u|w, y)   as marginal
=========== ===================== ============================== ==========================
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import diffengine as de
from .sampling import argmax_index, concrete_log_sample, gumbel_noise
from .source import Batch

SCHEME_KINDS = ("joint", "marginal", "conditional")
KINDS = SCHEME_KINDS
MODES = ("auto", "exact", "sampled")
RATE_TERMS = ("kl", "cross_entropy")
CHECKPOINT_FORMAT = "hbcompress-checkpoint/1"


@dataclass
class SchemeConfig:
    beta: float = 0.2
    lam: float = 10.0
    k_v: int = 64
    k_w: int = 16
    k_u: int = 16
    hidden_widths: tuple[int, ...] = (100, 100)
    negative_slope: float = 0.01
    mode: str = "auto"
    temperature: float = 0.5
    # None keeps the temperature fixed; otherwise exponential anneal to this value
    temperature_final: float | None = None
    # "kl": E[log p - log q] (variational bound); "cross_entropy": E[-log q],
    # the rate an entropy coder pays, whose minimizers are deterministic encoders
    rate_term: str = "kl"

    def __post_init__(self):
        self.hidden_widths = tuple(int(h) for h in self.hidden_widths)
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        for name in ("k_v", "k_w", "k_u"):
            if int(getattr(self, name)) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.rate_term not in RATE_TERMS:
            raise ValueError(f"rate_term must be one of {RATE_TERMS}, got {self.rate_term!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.temperature > 0 or (self.temperature_final is not None and not self.temperature_final > 0):
            raise ValueError("temperatures must be positive")
        if not 0.0 < self.negative_slope < 1.0:
            raise ValueError("negative_slope must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SchemeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scheme config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    rate_nats: float
    d1_mse: float
    d2_mse: float
    weighted_mse: float
    total: float
    tensor: de.Tensor | None = field(default=None, repr=False, compare=False)


def _one_hot(idx, k: int) -> np.ndarray:
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= k):
        raise IndexError(f"code index out of range [0, {k})")
    return np.eye(k)[idx]


class SchemeModel:
    """Parameters and network layout of one learned compressor."""

    kind: str = ""

    def __init__(
        self,
        cfg: SchemeConfig,
        params: dict[str, np.ndarray] | None = None,
        seed: int | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.cfg = cfg
        self.specs = self._layout()
        self.seed = seed
        self.history: list[dict] = []
        if params is None:
            params = self._init_params(rng if rng is not None else np.random.default_rng(seed))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._check_shapes()

    # layout ---------------------------------------------------------------

    def _mlp(self, n_in: int, n_out: int) -> de.MlpSpec:
        return de.MlpSpec(n_in, n_out, self.cfg.hidden_widths, self.cfg.negative_slope)

    def _layout(self) -> dict[str, object]:
        raise NotImplementedError

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, spec in self.specs.items():
            if isinstance(spec, de.MlpSpec):
                for i, layer in enumerate(de.init_mlp(spec, rng)):
                    params[f"{name}.{i}.weight"] = layer.weights
                    params[f"{name}.{i}.bias"] = layer.bias
            else:
                params[f"{name}.logits"] = np.zeros(int(spec))
        return params

    def _check_shapes(self) -> None:
        expected = {k: v.shape for k, v in self._init_params(np.random.default_rng(0)).items()}
        got = {k: v.shape for k, v in self.params.items()}
        if expected != got:
            raise ValueError(f"{self.kind} parameters do not match the layout: {sorted(set(expected) ^ set(got))}")

    def copy(self) -> "SchemeModel":
        other = type(self)(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.seed)
        other.history = [dict(h) for h in self.history]
        return other

    # evaluation helpers ---------------------------------------------------

    def net(self, name: str, x, params: Mapping | None = None) -> de.Tensor:
        params = self.params if params is None else params
        spec = self.specs[name]
        layers = [
            de.DenseLayerParams(params[f"{name}.{i}.weight"], params[f"{name}.{i}.bias"])
            for i in range(len(spec.layer_shapes()))
        ]
        return de.mlp_forward(spec, layers, x)

    def prior_logprobs(self, name: str, params: Mapping | None = None) -> de.Tensor:
        params = self.params if params is None else params
        logits = params[f"{name}.logits"]
        return de.log_softmax(de.reshape(de._as_tensor(logits), (1, -1)))

    @property
    def mode(self) -> str:
        if self.cfg.mode != "auto":
            return self.cfg.mode
        return "exact" if self.kind == "joint" else "sampled"

    # checkpoints ----------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "scheme": self.kind,
            "config": self.cfg.to_dict(),
            "seed": self.seed,
            "params": {
                name: {"shape": list(v.shape), "values": v.ravel().tolist()} for name, v in self.params.items()
            },
            "history": self.history,
        }
        return json.dumps(doc, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


class JointModel(SchemeModel):
    kind = "joint"

    def _layout(self):
        k = self.cfg.k_v
        return {"enc": self._mlp(1, k), "prior": k, "dec1": self._mlp(k, 1), "dec2": self._mlp(k + 1, 1)}

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        return (self.cfg.k_v,)


class MarginalModel(SchemeModel):
    kind = "marginal"

    def _prior_u_inputs(self) -> int:
        return self.cfg.k_w

    def _layout(self):
        kw, ku = self.cfg.k_w, self.cfg.k_u
        return {
            "enc_w": self._mlp(1, kw),
            "enc_u": self._mlp(kw + 1, ku),
            "prior_w": kw,
            "prior_u": self._mlp(self._prior_u_inputs(), ku),
            "dec1": self._mlp(kw, 1),
            "dec2": self._mlp(ku + kw + 1, 1),
        }

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        return (self.cfg.k_w, self.cfg.k_u)


class ConditionalModel(MarginalModel):
    kind = "conditional"

    def _prior_u_inputs(self) -> int:
        return self.cfg.k_w + 1


MODEL_CLASSES = {"joint": JointModel, "marginal": MarginalModel, "conditional": ConditionalModel}


def make_model(kind: str, cfg: SchemeConfig, seed: int | None = 0, rng=None) -> SchemeModel:
    try:
        cls = MODEL_CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown scheme {kind!r}; expected one of {KINDS}") from None
    return cls(cfg, seed=seed, rng=rng)


def model_from_json(text: str) -> SchemeModel:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint: format {doc.get('format')!r}")
    cfg = SchemeConfig.from_dict(doc["config"])
    params = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    model = MODEL_CLASSES[doc["scheme"]](cfg, params, doc.get("seed"))
    model.history = doc.get("history", [])
    return model


def load_model(path) -> SchemeModel:
    with open(path) as fh:
        return model_from_json(fh.read())


# ---------------------------------------------------------------------------
# losses


def _finish(rate, d1, d2, cfg: SchemeConfig) -> LossBreakdown:
    rate_m, d1_m, d2_m = de.mean(rate), de.mean(d1), de.mean(d2)
    weighted = d1_m * cfg.beta + d2_m * (1.0 - cfg.beta)
    total = rate_m + weighted * cfg.lam
    return LossBreakdown(
        rate_nats=float(rate_m.value),
        d1_mse=float(d1_m.value),
        d2_mse=float(d2_m.value),
        weighted_mse=float(weighted.value),
        total=float(total.value),
        tensor=total,
    )


def rate_integrand(logp: de.Tensor, logq, rate_term: str) -> de.Tensor:
    """Per-index code-length term: log p - log q, or -log q for ``cross_entropy``."""
    if rate_term == "kl":
        return logp - logq
    return de.neg(logq)


def relaxed_rate(log_sample: de.Tensor, logp: de.Tensor, logq, rate_term: str = "kl") -> de.Tensor:
    """Rate (nats) of a relaxed one-hot ``exp(log_sample)``: its inner product with the integrand.

    With a hard one-hot this is exactly the per-sample code-length term.
    """
    return de.sum(de.exp(log_sample) * rate_integrand(logp, logq, rate_term), axis=-1)


def _noise(rng, noise, index: int, shape) -> np.ndarray:
    if noise is not None:
        return noise[index]
    if rng is None:
        raise ValueError("sampled mode needs an rng or frozen noise")
    return gumbel_noise(rng, shape)


def draw_noise(model: SchemeModel, batch_size: int, rng1: np.random.Generator, rng2=None) -> tuple:
    """Gumbel noise for one sampled-mode loss evaluation, one array per stage."""
    rng2 = rng1 if rng2 is None else rng2
    sizes = model.stage_sizes
    draws = [gumbel_noise(rng1, (batch_size, sizes[0]))]
    if len(sizes) > 1:
        draws.append(gumbel_noise(rng2, (batch_size, sizes[1])))
    return tuple(draws)


def joint_loss(
    model: JointModel,
    batch: Batch,
    rng: np.random.Generator | None = None,
    *,
    params: Mapping | None = None,
    temperature: float | None = None,
    noise: tuple | None = None,
) -> LossBreakdown:
    """Rate E[log p(v|x) - log q(v)] plus lambda times the weighted squared error."""
    cfg = model.cfg
    p = model.params if params is None else params
    tau = cfg.temperature if temperature is None else temperature
    x = batch.x[:, None]
    y = batch.y[:, None]
    B, K = len(batch), cfg.k_v

    logp = de.log_softmax(model.net("enc", x, p))
    logq = model.prior_logprobs("prior", p)
    excess = rate_integrand(logp, logq, cfg.rate_term)

    if model.mode == "exact":
        probs = de.exp(logp)
        rate = de.sum(probs * excess, axis=1)
        xhat1 = de.reshape(model.net("dec1", np.eye(K), p), (1, K))
        inputs = np.concatenate([np.tile(np.eye(K), (B, 1)), np.repeat(batch.y, K)[:, None]], axis=1)
        xhat2 = de.reshape(model.net("dec2", inputs, p), (B, K))
        d1 = de.sum(probs * de.square(xhat1 - x), axis=1)
        d2 = de.sum(probs * de.square(xhat2 - x), axis=1)
    else:
        log_v = concrete_log_sample(logp, tau, noise=_noise(rng, noise, 0, (B, K)))
        v = de.exp(log_v)
        rate = relaxed_rate(log_v, logp, logq, cfg.rate_term)
        xhat1 = model.net("dec1", v, p)
        xhat2 = model.net("dec2", de.concat([v, y], axis=1), p)
        d1 = de.reshape(de.square(xhat1 - x), (B,))
        d2 = de.reshape(de.square(xhat2 - x), (B,))
    return _finish(rate, d1, d2, cfg)


def _layered_loss(model: MarginalModel, batch: Batch, rng, params, temperature, noise) -> LossBreakdown:
    cfg = model.cfg
    p = model.params if params is None else params
    tau = cfg.temperature if temperature is None else temperature
    conditional = model.kind == "conditional"
    x = batch.x[:, None]
    y = batch.y[:, None]
    B, Kw, Ku = len(batch), cfg.k_w, cfg.k_u

    logpw = de.log_softmax(model.net("enc_w", x, p))
    logqw = model.prior_logprobs("prior_w", p)
    excess_w = rate_integrand(logpw, logqw, cfg.rate_term)

    if model.mode == "exact":
        eye_w = np.eye(Kw)
        pw = de.exp(logpw)
        rows_w = np.tile(eye_w, (B, 1))  # row b*Kw + w
        enc_u_in = np.concatenate([rows_w, np.repeat(batch.x, Kw)[:, None]], axis=1)
        logpu = de.reshape(de.log_softmax(model.net("enc_u", enc_u_in, p)), (B, Kw, Ku))
        if conditional:
            prior_in = np.concatenate([rows_w, np.repeat(batch.y, Kw)[:, None]], axis=1)
            logqu = de.reshape(de.log_softmax(model.net("prior_u", prior_in, p)), (B, Kw, Ku))
        else:
            logqu = de.reshape(de.log_softmax(model.net("prior_u", eye_w, p)), (1, Kw, Ku))
        pu = de.exp(logpu)
        rate_u = de.sum(pu * rate_integrand(logpu, logqu, cfg.rate_term), axis=2)  # [B, Kw]
        rate = de.sum(pw * (excess_w + rate_u), axis=1)

        xhat1 = de.reshape(model.net("dec1", eye_w, p), (1, Kw))
        d1 = de.sum(pw * de.square(xhat1 - x), axis=1)
        # rows ordered (b, w, u)
        code_rows = np.concatenate(
            [np.tile(np.eye(Ku), (Kw, 1)), np.repeat(eye_w, Ku, axis=0)], axis=1
        )
        dec2_in = np.concatenate([np.tile(code_rows, (B, 1)), np.repeat(batch.y, Kw * Ku)[:, None]], axis=1)
        xhat2 = de.reshape(model.net("dec2", dec2_in, p), (B, Kw, Ku))
        err2 = de.sum(pu * de.square(xhat2 - batch.x[:, None, None]), axis=2)
        d2 = de.sum(pw * err2, axis=1)
    else:
        log_w = concrete_log_sample(logpw, tau, noise=_noise(rng, noise, 0, (B, Kw)))
        w = de.exp(log_w)
        logpu = de.log_softmax(model.net("enc_u", de.concat([w, x], axis=1), p))
        log_u = concrete_log_sample(logpu, tau, noise=_noise(rng, noise, 1, (B, Ku)))
        u = de.exp(log_u)
        prior_in = de.concat([w, y], axis=1) if conditional else w
        logqu = de.log_softmax(model.net("prior_u", prior_in, p))
        rate = relaxed_rate(log_w, logpw, logqw, cfg.rate_term) + relaxed_rate(log_u, logpu, logqu, cfg.rate_term)
        xhat1 = model.net("dec1", w, p)
        xhat2 = model.net("dec2", de.concat([u, w, y], axis=1), p)
        d1 = de.reshape(de.square(xhat1 - x), (B,))
        d2 = de.reshape(de.square(xhat2 - x), (B,))
    return _finish(rate, d1, d2, cfg)


def marginal_loss(model: MarginalModel, batch: Batch, rng=None, *, params=None, temperature=None, noise=None):
    """Rate E[log p(w|x)/q(w) + log p(u|w,x)/q(u|w)] plus lambda times d_s."""
    if model.kind != "marginal":
        raise TypeError(f"marginal_loss needs a marginal model, got {model.kind}")
    return _layered_loss(model, batch, rng, params, temperature, noise)


def conditional_loss(model: ConditionalModel, batch: Batch, rng=None, *, params=None, temperature=None, noise=None):
    """As the marginal loss, with the stage-2 entropy model q(u|w,y) seeing y."""
    if model.kind != "conditional":
        raise TypeError(f"conditional_loss needs a conditional model, got {model.kind}")
    return _layered_loss(model, batch, rng, params, temperature, noise)


def hard_code_loss(model: SchemeModel, batch: Batch, *, params: Mapping | None = None) -> LossBreakdown:
    """The loss at the argmax codes the deployed encoders emit.

    Encoders are evaluated on ``model.params`` and treated as constants, so
    only entropy models and decoders receive gradients. The rate is the
    cross-entropy -log q of the hard indices (nats), as at evaluation.
    """
    cfg = model.cfg
    p = model.params if params is None else params
    y = batch.y[:, None]
    codes = encode(model, batch.x)
    first = _one_hot(codes[0], model.stage_sizes[0])
    prior1 = "prior" if model.kind == "joint" else "prior_w"
    rate = de.neg(de.sum(model.prior_logprobs(prior1, p) * first, axis=1))
    xhat1 = model.net("dec1", first, p)
    if model.kind == "joint":
        xhat2 = model.net("dec2", np.concatenate([first, y], axis=1), p)
    else:
        second = _one_hot(codes[1], cfg.k_u)
        prior_in = np.concatenate([first, y], axis=1) if model.kind == "conditional" else first
        logqu = de.log_softmax(model.net("prior_u", prior_in, p))
        rate = rate - de.sum(logqu * second, axis=1)
        xhat2 = model.net("dec2", np.concatenate([second, first, y], axis=1), p)
    d1 = de.reshape(de.square(xhat1 - batch.x[:, None]), (len(batch),))
    d2 = de.reshape(de.square(xhat2 - batch.x[:, None]), (len(batch),))
    return _finish(rate, d1, d2, cfg)


LOSS_FNS = {"joint": joint_loss, "marginal": marginal_loss, "conditional": conditional_loss}


def scheme_loss(model: SchemeModel, batch: Batch, rng=None, **kw) -> LossBreakdown:
    return LOSS_FNS[model.kind](model, batch, rng, **kw)


# ---------------------------------------------------------------------------
# deterministic encoders and decoders


def _column(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))[:, None]


def encode_joint(model: JointModel, x):
    """v = argmax p(v|x); scalar in, scalar out."""
    idx = argmax_index(model.net("enc", _column(x)))
    return int(idx[0]) if np.ndim(x) == 0 else idx


def encode_layered(model: MarginalModel, x):
    """(w, u) with w = argmax p(w|x) and u = argmax p(u|w, x)."""
    xc = _column(x)
    w = argmax_index(model.net("enc_w", xc))
    u = argmax_index(model.net("enc_u", np.concatenate([_one_hot(w, model.cfg.k_w), xc], axis=1)))
    if np.ndim(x) == 0:
        return int(w[0]), int(u[0])
    return w, u


def encode(model: SchemeModel, x):
    """Stage indices as a tuple of arrays: (v,) or (w, u)."""
    if model.kind == "joint":
        return (np.atleast_1d(encode_joint(model, np.atleast_1d(x))),)
    return tuple(np.atleast_1d(c) for c in encode_layered(model, np.atleast_1d(x)))


def _split_code(model: SchemeModel, code):
    if model.kind == "joint":
        return np.atleast_1d(code[0] if isinstance(code, tuple) else code), None
    if not isinstance(code, tuple):
        return np.atleast_1d(code), None
    w, u = code
    return np.atleast_1d(w), np.atleast_1d(u)


def decode_uninformed(model: SchemeModel, code) -> np.ndarray:
    """x_hat1 from v (joint) or w (layered; a (w, u) tuple is accepted)."""
    first, _ = _split_code(model, code)
    k = model.stage_sizes[0]
    return model.net("dec1", _one_hot(first, k)).value[:, 0]


def decode_informed(model: SchemeModel, code, y) -> np.ndarray:
    """x_hat2 from the full code and the side information y."""
    first, second = _split_code(model, code)
    yc = np.broadcast_to(_column(y), (len(first), 1)) if np.size(y) == 1 else _column(y)
    if model.kind == "joint":
        inputs = np.concatenate([_one_hot(first, model.cfg.k_v), yc], axis=1)
    else:
        if second is None:
            raise ValueError("layered informed decoding needs (w, u)")
        inputs = np.concatenate([_one_hot(second, model.cfg.k_u), _one_hot(first, model.cfg.k_w), yc], axis=1)
    return model.net("dec2", inputs).value[:, 0]


def stage1_log2_probs(model: SchemeModel) -> np.ndarray:
    """log2 of the unconditional entropy model over v or w."""
    name = "prior" if model.kind == "joint" else "prior_w"
    return model.prior_logprobs(name).value[0] / np.log(2.0)


def stage2_log2_probs(model: SchemeModel, w, y=None) -> np.ndarray:
    """log2 q(u|w) (marginal) or log2 q(u|w, y) (conditional), one row per sample."""
    if model.kind == "joint":
        raise ValueError("the joint scheme has a single stage")
    inputs = _one_hot(np.atleast_1d(w), model.cfg.k_w)
    if model.kind == "conditional":
        if y is None:
            raise ValueError("the conditional entropy model needs y")
        inputs = np.concatenate([inputs, _column(y)], axis=1)
    return de.log_softmax(model.net("prior_u", inputs)).value / np.log(2.0)
