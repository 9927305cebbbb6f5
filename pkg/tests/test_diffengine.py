import numpy as np
import pytest

from hbcompress import diffengine as de


def plain_forward(weights, biases, x, slope=0.01):
    """Straight-line reference for a dense leaky-ReLU stack."""
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w.T + b
        if i < len(weights) - 1:
            h = np.where(h > 0, h, slope * h)
    return h


def traced(params):
    tape = de.GradientTape()
    return tape, tape.watch_all(params)


class TestPrimitives:
    def test_leaky_relu_values(self):
        np.testing.assert_allclose(de.leaky_relu(de.Tensor([2.0]), 0.01).value, [2.0])
        np.testing.assert_allclose(de.leaky_relu(de.Tensor([-1.0]), 0.01).value, [-0.01])

    def test_leaky_relu_gradient_on_negative_side(self):
        tape, p = traced({"x": np.array([-3.0])})
        g = tape.backward(de.sum(de.leaky_relu(p["x"], 0.01)))
        np.testing.assert_allclose(g["x"], [0.01])

    @pytest.mark.parametrize("slope", [0.0, 1.0, -0.2])
    def test_leaky_relu_rejects_slope(self, slope):
        with pytest.raises(ValueError):
            de.leaky_relu(de.Tensor([1.0]), slope)

    def test_log_softmax_values(self):
        np.testing.assert_allclose(de.log_softmax(de.Tensor([0.0, 0.0])).value, [-np.log(2)] * 2, atol=1e-15)
        expected = [np.log(np.e / (np.e + 1)), np.log(1 / (np.e + 1))]
        np.testing.assert_allclose(de.log_softmax(de.Tensor([1.0, 0.0])).value, expected, atol=1e-15)
        np.testing.assert_allclose(expected, [-0.31326169, -1.31326169], atol=1e-8)

    def test_log_softmax_shift_invariant(self):
        z = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(de.log_softmax(de.Tensor(z + 7.5)).value, de.log_softmax(de.Tensor(z)).value, atol=1e-14)

    def test_log_softmax_normalized_for_wide_logits(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(-50, 50, size=(500, 7))
        np.testing.assert_allclose(np.exp(de.log_softmax(de.Tensor(z)).value).sum(axis=-1), 1.0, atol=1e-12)

    def test_log_softmax_rejects_empty(self):
        with pytest.raises(ValueError):
            de.log_softmax(de.Tensor(np.zeros(0)))

    def test_non_finite_forward_aborts(self):
        with pytest.raises(de.NonFiniteError):
            de.exp(de.Tensor([1000.0]))
        with pytest.raises(de.NonFiniteError):
            de.log(de.Tensor([0.0]))

    def test_logsumexp_and_softmax(self):
        z = np.array([[1.0, 2.0, 3.0], [-700.0, -701.0, -702.0]])
        ref = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
        np.testing.assert_allclose(de.logsumexp(de.Tensor(z)).value, ref, rtol=1e-14)
        np.testing.assert_allclose(de.softmax(de.Tensor(z)).value, np.exp(z - ref[:, None]), rtol=1e-12)


class TestBackward:
    def test_linear_in_w(self):
        tape, p = traced({"w": np.array(0.7)})
        np.testing.assert_allclose(tape.backward(p["w"] * 3.0)["w"], 3.0)

    def test_sum_of_squares_at_zero(self):
        tape, p = traced({"a": np.zeros(3), "b": np.zeros((2, 2))})
        g = tape.backward(de.add(de.sum(de.square(p["a"])), de.sum(de.square(p["b"]))))
        assert not np.any(g["a"]) and not np.any(g["b"])

    def test_unused_params_get_zero_gradient(self):
        tape, p = traced({"used": np.ones(2), "idle": np.ones(4)})
        g = tape.backward(de.sum(p["used"] * 2.0))
        np.testing.assert_allclose(g["idle"], np.zeros(4))
        np.testing.assert_allclose(g["used"], [2.0, 2.0])

    def test_rejects_non_scalar(self):
        tape, p = traced({"a": np.ones(2)})
        with pytest.raises(ValueError):
            tape.backward(p["a"] * 1.0)

    def test_rejects_foreign_output(self):
        tape, p = traced({"a": np.ones(2)})
        other, q = traced({"a": np.ones(2)})
        with pytest.raises(ValueError):
            tape.backward(de.sum(q["a"]))

    def test_linearity_of_accumulation(self):
        rng = np.random.default_rng(1)
        spec = de.MlpSpec(2, 3, (5, 4))
        layers = de.init_mlp(spec, rng)
        params = {f"{k}{i}": getattr(l, k) for i, l in enumerate(layers) for k in ("weights", "bias")}
        x = rng.normal(size=(6, 2))

        def outputs(tape_params):
            ls = [de.DenseLayerParams(tape_params[f"weights{i}"], tape_params[f"bias{i}"]) for i in range(3)]
            return de.mlp_forward(spec, ls, x)

        tape, p = traced(params)
        total = tape.backward(de.sum(outputs(p)))
        parts = {k: np.zeros_like(v) for k, v in params.items()}
        for j in range(3):
            tape, p = traced(params)
            out = outputs(p)
            mask = np.zeros(out.shape)
            mask[:, j] = 1.0
            for k, g in tape.backward(de.sum(out * mask)).items():
                parts[k] += g
        for k in params:
            np.testing.assert_allclose(total[k], parts[k], rtol=1e-12, atol=1e-14)

    def test_broadcast_gradients(self):
        tape, p = traced({"row": np.array([[1.0, 2.0, 3.0]]), "m": np.ones((4, 3))})
        g = tape.backward(de.sum(p["m"] * p["row"]))
        np.testing.assert_allclose(g["row"], [[4.0, 4.0, 4.0]])
        np.testing.assert_allclose(g["m"], np.tile([1.0, 2.0, 3.0], (4, 1)))


class TestMlp:
    def test_zero_network(self):
        spec = de.MlpSpec(3, 2, (4, 4))
        layers = [de.DenseLayerParams(np.zeros(s), np.zeros(s[0])) for s in spec.layer_shapes()]
        np.testing.assert_array_equal(de.mlp_forward(spec, layers, np.ones((5, 3))).value, np.zeros((5, 2)))

    def test_identity_single_layer(self):
        spec = de.MlpSpec(1, 1, ())
        out = de.mlp_forward(spec, [de.DenseLayerParams(np.eye(1), np.zeros(1))], np.array([[1.5]]))
        np.testing.assert_array_equal(out.value, [[1.5]])

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(2)
        spec = de.MlpSpec(1, 8, (100, 100))
        layers = de.init_mlp(spec, rng)
        for l in layers:
            l.bias = rng.normal(size=l.bias.shape)
        x = rng.normal(size=(32, 1))
        ref = plain_forward([l.weights for l in layers], [l.bias for l in layers], x)
        np.testing.assert_allclose(de.mlp_forward(spec, layers, x).value, ref, rtol=0, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        spec = de.MlpSpec(2, 4)
        layers = de.init_mlp(spec, rng)
        x = rng.normal(size=(10, 2))
        a, b = de.mlp_forward(spec, layers, x).value, de.mlp_forward(spec, layers, x).value
        assert a.tobytes() == b.tobytes()

    def test_init_ranges(self):
        spec = de.MlpSpec(1, 8, (100, 100))
        for (fo, fi), l in zip(spec.layer_shapes(), de.init_mlp(spec, np.random.default_rng(4))):
            assert np.all(np.abs(l.weights) <= np.sqrt(6.0 / (fi + fo)))
            assert not np.any(l.bias)

    def test_shape_error_names_layer(self):
        spec = de.MlpSpec(2, 3, (4,))
        layers = de.init_mlp(spec, np.random.default_rng(5))
        layers[1].weights = np.zeros((3, 5))
        with pytest.raises(ValueError, match="layer 1"):
            de.mlp_forward(spec, layers, np.zeros((1, 2)))
        with pytest.raises(ValueError, match="layer 0"):
            de.mlp_forward(spec, de.init_mlp(spec, np.random.default_rng(5)), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            de.mlp_forward(spec, layers[:1], np.zeros((1, 2)))

    @pytest.mark.parametrize("kwargs", [dict(hidden_widths=(0, 3)), dict(negative_slope=1.0), dict(output_width=0)])
    def test_spec_validation(self, kwargs):
        base = dict(input_width=1, output_width=2)
        base.update(kwargs)
        with pytest.raises(ValueError):
            de.MlpSpec(**base)


class TestGradCheck:
    def test_quadratic(self):
        def f(p):
            return de.sum(de.square(p["v"] - 1.0) * 3.0)

        assert de.grad_check(f, {"v": np.array([0.2, -1.4, 3.0])}, 1e-5) <= 1e-9

    def test_mlp_mse(self):
        rng = np.random.default_rng(6)
        spec = de.MlpSpec(1, 2, (6, 6))
        layers = de.init_mlp(spec, rng)
        params = {}
        for i, l in enumerate(layers):
            params[f"w{i}"] = l.weights
            params[f"b{i}"] = rng.normal(scale=0.1, size=l.bias.shape)
        x, t = rng.normal(size=(8, 1)), rng.normal(size=(8, 2))

        def loss(p):
            ls = [de.DenseLayerParams(p[f"w{i}"], p[f"b{i}"]) for i in range(3)]
            return de.mean(de.square(de.mlp_forward(spec, ls, x) - t))

        assert de.grad_check(loss, params, 1e-5, numeric_dtype=np.longdouble) <= 1e-6

    def test_float64_differences_are_roundoff_limited(self):
        # A gradient component of 1e-7 on a loss of order 1: float64 central
        # differences carry about 1e-11 of cancellation error, extended precision
        # about 1e-14.
        def f(p):
            return de.sum(de.square(p["v"])) + 1.0

        params = {"v": np.array([5e-8, 0.3])}
        assert de.grad_check(f, params, 1e-5) > 1e-6
        assert de.grad_check(f, params, 1e-5, numeric_dtype=np.longdouble) <= 1e-6

    def test_extended_precision_propagates(self):
        t = de.Tensor(np.ones(3, dtype=np.longdouble))
        assert de.sum(de.exp(t)).value.dtype == np.longdouble
        assert de.Tensor(np.ones(3, dtype=np.float32)).value.dtype == np.float64

    def test_rejects_numeric_dtype(self):
        with pytest.raises(ValueError):
            de.grad_check(lambda p: de.sum(p["v"]), {"v": np.ones(1)}, 1e-5, numeric_dtype=np.float32)

    def test_detects_corrupted_gradient(self):
        params = {"v": np.array([0.5, -2.0])}
        f = lambda p: de.sum(de.square(p["v"]))
        bad = {"v": 2.0 * params["v"] * np.array([2.0, 1.0])}
        assert de.grad_check(f, params, 1e-5, analytic=bad) > 0.1

    def test_rejects_nondeterministic_loss(self):
        rng = np.random.default_rng(7)
        f = lambda p: de.sum(p["v"] * rng.normal())
        with pytest.raises(ValueError):
            de.grad_check(f, {"v": np.ones(2)}, 1e-5)

    @pytest.mark.parametrize("eps", [0.0, 1e-2])
    def test_rejects_epsilon(self, eps):
        with pytest.raises(ValueError):
            de.grad_check(lambda p: de.sum(p["v"]), {"v": np.ones(1)}, eps)
