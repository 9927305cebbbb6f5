import numpy as np
import pytest

from hbcompress.sampling import make_rng
from hbcompress.source import Batch, CorrelationModel, sample_batch


class TestSource:
    def test_degenerate_noise(self):
        b = sample_batch(CorrelationModel(1.0, 1e-300), 1000, make_rng(0))
        np.testing.assert_allclose(b.y, b.x, rtol=0, atol=1e-140)

    def test_moments(self):
        b = sample_batch(CorrelationModel(1.0, 0.1), 1_000_000, make_rng(1))
        n = b.y - b.x
        assert abs(b.x.var() - 1.0) < 0.01
        assert abs(n.var() - 0.1) < 0.005
        assert abs(np.corrcoef(b.x, n)[0, 1]) < 0.01

    def test_cross_moment(self):
        size = 1_000_000
        b = sample_batch(CorrelationModel(1.0, 0.1), size, make_rng(2))
        xy = b.x * b.y
        # Var(XY) = E[X^2 Y^2] - 1 = 3 + 0.1 - 1 for unit X variance.
        assert abs(xy.mean() - 1.0) < 3 * np.sqrt(2.1 / size)

    def test_reproducible(self):
        a = sample_batch(CorrelationModel(), 64, make_rng(3))
        b = sample_batch(CorrelationModel(), 64, make_rng(3))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        assert len(a) == 64

    def test_validation(self):
        with pytest.raises(ValueError):
            CorrelationModel(0.0, 0.1)
        with pytest.raises(ValueError):
            CorrelationModel(1.0, -0.1)
        with pytest.raises(ValueError):
            sample_batch(CorrelationModel(), 0, make_rng(0))
        with pytest.raises(ValueError):
            Batch(np.zeros(2), np.zeros(3))
