"""Closed-form rate-distortion quantities for the quadratic-Gaussian
Heegard-Berger problem, plus exact information measures on finite alphabets.

Rates are returned in bits, distortions as linear MSE unless a name says
``_db`` (10*log10 of the MSE). Finite-alphabet measures are in nats.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ECSQ_GAP_DB = 1.53


def to_db(mse):
    return 10.0 * np.log10(mse)


def from_db(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


@dataclass(frozen=True)
class GaussSetup:
    sigma_x2: float
    sigma_n2: float

    def __post_init__(self):
        if not (self.sigma_x2 > 0 and self.sigma_n2 > 0):
            raise ValueError("sigma_x2 and sigma_n2 must be positive")

    @property
    def conditional_variance(self) -> float:
        """Var(X | Y) = sigma_x2 * sigma_n2 / (sigma_x2 + sigma_n2)."""
        return self.sigma_x2 * self.sigma_n2 / (self.sigma_x2 + self.sigma_n2)


class RegionLabel(enum.Enum):
    POINT_TO_POINT_ONLY = "PointToPointOnly"
    WYNER_ZIV_ONLY = "WynerZivOnly"
    ZERO_RATE = "ZeroRate"
    BOTH_ACTIVE = "BothActive"


@dataclass
class RdPoint:
    rate_bits: float
    d1_db: float
    d2_db: float
    weighted_db: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rate_bits < 0:
            raise ValueError(f"negative rate {self.rate_bits}")
        if not all(math.isfinite(v) for v in (self.d1_db, self.d2_db, self.weighted_db)):
            raise ValueError("dB fields must be finite")


def _check_positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")


def wz_threshold(setup: GaussSetup, d1: float) -> float:
    """Largest informed-decoder MSE that needs no Wyner-Ziv rate, given d1."""
    delta1 = min(setup.sigma_x2, d1)
    return setup.sigma_n2 * delta1 / (delta1 + setup.sigma_n2)


def hb_rate(setup: GaussSetup, d1: float, d2: float) -> float:
    """Heegard-Berger rate R(D1, D2) in bits."""
    _check_positive(d1=d1, d2=d2)
    delta1 = min(setup.sigma_x2, d1)
    threshold = setup.sigma_n2 * delta1 / (delta1 + setup.sigma_n2)
    delta2 = min(threshold, d2)
    return 0.5 * math.log2(setup.sigma_x2 / delta1) + 0.5 * math.log2(threshold / delta2)


def p2p_rate(sigma_x2: float, d: float) -> float:
    _check_positive(d=d)
    return max(0.0, 0.5 * math.log2(sigma_x2 / d))


def wz_rate(setup: GaussSetup, d2: float) -> float:
    _check_positive(d2=d2)
    return max(0.0, 0.5 * math.log2(setup.conditional_variance / d2))


def classify_region(setup: GaussSetup, d1: float, d2: float) -> RegionLabel:
    """Which terms of R(D1, D2) are non-zero.

    Boundary points go to the label with fewer active terms. The informed
    threshold is evaluated at min(sigma_x2, d1), matching the rate formula.
    """
    _check_positive(d1=d1, d2=d2)
    first = d1 < setup.sigma_x2
    second = d2 < wz_threshold(setup, d1)
    if first and second:
        return RegionLabel.BOTH_ACTIVE
    if first:
        return RegionLabel.POINT_TO_POINT_ONLY
    if second:
        return RegionLabel.WYNER_ZIV_ONLY
    return RegionLabel.ZERO_RATE


def _clamp(x, lo, hi):
    return min(max(lo, x), hi)


def min_weighted_distortion(setup: GaussSetup, beta: float, rate_bits: float) -> tuple[float, float, float]:
    """Minimum of beta*D1 + (1-beta)*D2 at rate R; returns (D*, D1*, D2*).

    beta in {0, 1} is the continuous limit: the unclamped optimum runs off to
    infinity or zero and lands on the corresponding clamp.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if rate_bits < 0:
        raise ValueError(f"rate must be non-negative, got {rate_bits}")
    sx, sn = setup.sigma_x2, setup.sigma_n2
    shrink = 2.0 ** (-2.0 * rate_bits)
    c = shrink * sx * sn

    d1_lo, d1_hi = shrink * sx, sx
    d2_lo = shrink / (1.0 / sx + 1.0 / sn)
    d2_hi = 1.0 / (1.0 / (shrink * sx) + 1.0 / sn)

    if beta == 0.0:
        raw1, raw2 = math.inf, 0.0
    elif beta == 1.0:
        raw1, raw2 = -sn, math.inf
    else:
        raw1 = math.sqrt(c * (1.0 - beta) / beta) - sn
        raw2 = math.sqrt(c * beta / (1.0 - beta))
    d1 = _clamp(raw1, d1_lo, d1_hi)
    d2 = _clamp(raw2, d2_lo, d2_hi)
    return beta * d1 + (1.0 - beta) * d2, d1, d2


@dataclass
class BoundCurve:
    setup: GaussSetup
    beta: float
    rate_bits: np.ndarray
    d_star: np.ndarray
    d1_star: np.ndarray
    d2_star: np.ndarray

    @property
    def d_star_db(self) -> np.ndarray:
        return to_db(self.d_star)

    @property
    def d_star_plus_153_db(self) -> np.ndarray:
        return self.d_star_db + ECSQ_GAP_DB

    def points(self) -> list[RdPoint]:
        return [
            RdPoint(float(r), float(to_db(a)), float(to_db(b)), float(to_db(d)), {"kind": "bound"})
            for r, d, a, b in zip(self.rate_bits, self.d_star, self.d1_star, self.d2_star)
        ]

    def weighted_db_at(self, rate_bits) -> np.ndarray:
        """D*(R) in dB evaluated directly at arbitrary rates."""
        rates = np.atleast_1d(np.asarray(rate_bits, dtype=float))
        return to_db(np.array([min_weighted_distortion(self.setup, self.beta, r)[0] for r in rates]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rate_bits", "d_star_db", "d_star_plus_153_db", "d1_star_db", "d2_star_db"])
            for row in zip(
                self.rate_bits, self.d_star_db, self.d_star_plus_153_db, to_db(self.d1_star), to_db(self.d2_star)
            ):
                writer.writerow([repr(float(v)) for v in row])


def bound_curve(setup: GaussSetup, beta: float, rate_grid: Sequence[float]) -> BoundCurve:
    rates = np.asarray(rate_grid, dtype=float)
    if np.any(rates < 0):
        raise ValueError("rates must be non-negative")
    if np.any(np.diff(rates) < 0):
        raise ValueError("rate grid must be sorted")
    rows = np.array([min_weighted_distortion(setup, beta, r) for r in rates]).reshape(-1, 3)
    return BoundCurve(setup, beta, rates, rows[:, 0], rows[:, 1], rows[:, 2])


# ---------------------------------------------------------------------------
# finite alphabets


def check_joint(p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim < 2 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("joint table must be a finite non-negative array of rank >= 2")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"joint table sums to {p.sum()!r}, not 1")
    return p


def finite_mi(joint: np.ndarray) -> float:
    """Exact I(A;B) in nats for a 2-D table p(a, b)."""
    p = check_joint(joint)
    if p.ndim != 2:
        raise ValueError("finite_mi needs a 2-D table")
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] > 0:
                total += p[i, j] * math.log(p[i, j] / (pa[i] * pb[j]))
    return total


def conditional_mi(joint_abc: np.ndarray) -> float:
    """I(A;B|C) in nats for a table p(a, b, c)."""
    p = check_joint(joint_abc)
    total = 0.0
    for k in range(p.shape[2]):
        pc = p[:, :, k].sum()
        if pc > 0:
            total += pc * finite_mi(p[:, :, k] / pc)
    return total


def random_markov_joint(rng: np.random.Generator, nx=4, ny=4, nw=3, nu=3) -> np.ndarray:
    """Random p(x, y, w, u) = p(x, y) p(w, u | x), indexed [x, y, w, u]."""
    pxy = rng.dirichlet(np.ones(nx * ny)).reshape(nx, ny)
    pwu_x = rng.dirichlet(np.ones(nw * nu), size=nx).reshape(nx, nw, nu)
    joint = pxy[:, :, None, None] * pwu_x[:, None, :, :]
    return joint / joint.sum()


def verify_bound_chain(joint_xywu: np.ndarray, tol: float = 1e-12) -> tuple[float, float, bool]:
    """Check I(X;W) + I(X;U|Y,W) <= I(X;(W,U)) for a Markov (W,U)-X-Y table.

    Returns (lhs, rhs, holds).
    """
    p = check_joint(joint_xywu)
    nx, ny, nw, nu = p.shape
    i_xw = finite_mi(p.sum(axis=(1, 3)))
    # p(x, u, (y, w)) with the conditioning pair flattened
    p_xu_yw = p.transpose(0, 3, 1, 2).reshape(nx, nu, ny * nw)
    i_xu_given_yw = conditional_mi(p_xu_yw)
    rhs = finite_mi(p.sum(axis=1).reshape(nx, nw * nu))
    lhs = i_xw + i_xu_given_yw
    return lhs, rhs, lhs <= rhs + tol
