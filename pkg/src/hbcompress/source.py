"""Quadratic-Gaussian correlated source: Y = X + N."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import sample_gaussian


@dataclass(frozen=True)
class CorrelationModel:
    sigma_x2: float = 1.0
    sigma_n2: float = 0.1

    def __post_init__(self):
        if not (self.sigma_x2 > 0 and self.sigma_n2 > 0):
            raise ValueError("variances must be positive")


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have equal lengths")

    def __len__(self) -> int:
        return len(self.x)


def sample_batch(model: CorrelationModel, size: int, rng: np.random.Generator) -> Batch:
    """Draw ``size`` i.i.d. pairs (all of X first, then all of N, from ``rng``)."""
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    x = sample_gaussian(rng, 0.0, model.sigma_x2, size)
    n = sample_gaussian(rng, 0.0, model.sigma_n2, size)
    return Batch(x=x, y=x + n)
