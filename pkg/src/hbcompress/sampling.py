"""Seeded randomness and discrete sampling (Gumbel-max, Concrete, argmax).

Generators are numpy ``Generator`` objects on the PCG64 bit generator.
Substreams come from ``SeedSequence.spawn`` so that, within one numpy
release, a seed fixes every stream and consumers never share state.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import diffengine as de

GUMBEL_CLAMP = 1e-12

# Substream order is part of the reproducibility contract; append only.
STREAM_NAMES = ("data", "gumbel_stage1", "gumbel_stage2", "init", "eval")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def split_streams(seed: int, names: Sequence[str] = STREAM_NAMES) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(names, children)}


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel draws ``-ln(-ln u)``, u clamped to [1e-12, 1 - 1e-12]."""
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def argmax_index(logits) -> np.ndarray | int:
    """Index of the largest logit; ties go to the smallest index.

    Works along the last axis, so batched logits give an index array.
    """
    values = logits.value if isinstance(logits, de.Tensor) else np.asarray(logits, dtype=float)
    idx = np.argmax(values, axis=-1)  # numpy returns the first maximum
    return int(idx) if np.ndim(idx) == 0 else idx


def gumbel_max_sample(logits, rng: np.random.Generator) -> np.ndarray | int:
    """Categorical draw(s) with law softmax(logits) via argmax(logits + G)."""
    values = logits.value if isinstance(logits, de.Tensor) else np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("logits must be finite")
    return argmax_index(values + gumbel_noise(rng, values.shape))


def concrete_sample(
    logits,
    temperature: float,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
) -> de.Tensor:
    """Relaxed one-hot ``softmax((logits + G) / temperature)``.

    Differentiable w.r.t. ``logits`` when they are traced. Pass ``noise`` to
    reuse a frozen Gumbel draw instead of sampling from ``rng``.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = logits if isinstance(logits, de.Tensor) else de.Tensor(logits)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = gumbel_noise(rng, logits.shape)
    return de.softmax((logits + noise) * (1.0 / temperature), axis=-1)


def concrete_log_sample(logits, temperature: float, rng=None, *, noise=None) -> de.Tensor:
    """Log of a Concrete sample, ``log_softmax((logits + G) / temperature)``.

    Stays finite where the relaxed one-hot itself would underflow.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = logits if isinstance(logits, de.Tensor) else de.Tensor(logits)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = gumbel_noise(rng, logits.shape)
    return de.log_softmax((logits + noise) * (1.0 / temperature), axis=-1)


def sample_gaussian(rng: np.random.Generator, mean: float = 0.0, variance: float = 1.0, size=None):
    """Draw(s) from N(mean, variance).

    Uses numpy's ziggurat standard normal on PCG64 output, scaled by the
    standard deviation; variance 0 returns ``mean`` exactly.
    """
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    z = rng.standard_normal(size)
    return mean + np.sqrt(variance) * z
