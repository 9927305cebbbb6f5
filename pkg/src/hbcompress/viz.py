"""Quantization maps, codebooks and decoder response curves of trained models.

Everything here is read-only over a frozen model. The SVG is a plain
hand-written document (no plotting dependency); the CSV files carry every
plotted number.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import diffengine as de
from .schemes import SchemeModel, decode_informed, decode_uninformed, encode

MIN_RUN_WIDTH = 3
BOUNDARY_HEADER = ["stage", "index", "x_lo", "x_hi"]
CODEBOOK_HEADER = ["stage", "index", "reconstruction", "prior_mass", "empirical_mass"]
CURVE_HEADER = ["w", "u", "y", "x_hat2"]


def default_grid(sigma_x2: float = 1.0) -> tuple[float, float, float]:
    """(x_lo, x_hi, step) covering four standard deviations at sigma/500 spacing."""
    s = float(np.sqrt(sigma_x2))
    return -4.0 * s, 4.0 * s, s / 500.0


def make_grid(lo: float, hi: float, step: float) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo}, {hi}")
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


@dataclass
class QuantizationMap:
    """Index per grid point and, per index, its maximal contiguous runs.

    A run is stored as (x_lo, x_hi, n_points) with x_lo and x_hi the first
    and last grid points of the run.
    """

    grid: np.ndarray
    index: np.ndarray
    intervals: dict[int, list[tuple[float, float, int]]] = field(default_factory=dict)

    @classmethod
    def from_indices(cls, grid, index) -> "QuantizationMap":
        grid = np.asarray(grid, dtype=np.float64)
        index = np.asarray(index, dtype=np.int64)
        if grid.shape != index.shape or grid.ndim != 1 or grid.size == 0:
            raise ValueError("grid and index must be equal-length non-empty vectors")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        starts = np.flatnonzero(np.diff(index, prepend=index[0] - 1))
        ends = np.append(starts[1:], len(index)) - 1
        intervals: dict[int, list] = {}
        for a, b in zip(starts, ends):
            intervals.setdefault(int(index[a]), []).append((float(grid[a]), float(grid[b]), int(b - a + 1)))
        return cls(grid, index, dict(sorted(intervals.items())))

    def boundaries(self) -> np.ndarray:
        """Midpoints between neighbouring grid points whose indices differ."""
        change = np.flatnonzero(np.diff(self.index))
        return 0.5 * (self.grid[change] + self.grid[change + 1])


def scan_encoder(encode_fn: Callable, x_lo: float, x_hi: float, step: float) -> QuantizationMap:
    """Evaluate a deterministic index map on the grid and collect its runs.

    ``encode_fn`` takes a vector of x and returns one index per entry.
    """
    grid = make_grid(x_lo, x_hi, step)
    return QuantizationMap.from_indices(grid, np.asarray(encode_fn(grid)).reshape(grid.shape))


def detect_binning(qmap: QuantizationMap, min_width: int = MIN_RUN_WIDTH) -> list[tuple[int, int]]:
    """Indices owning two or more disjoint runs, as (index, run count).

    Runs shorter than ``min_width`` grid points are ignored, so argmax
    flicker at a cell boundary does not count as a bin.
    """
    found = []
    for idx, runs in qmap.intervals.items():
        count = sum(1 for run in runs if run[2] >= min_width)
        if count >= 2:
            found.append((idx, count))
    return found


def stage_maps(model: SchemeModel, x_lo: float, x_hi: float, step: float) -> dict[str, QuantizationMap]:
    """Quantization maps of every stage: {"v"} for joint, {"w", "u"} otherwise."""
    names = ("v",) if model.kind == "joint" else ("w", "u")
    return {name: scan_encoder(lambda x, i=i: encode(model, x)[i], x_lo, x_hi, step) for i, name in enumerate(names)}


@dataclass
class CodebookExport:
    stage: str
    reconstruction: np.ndarray
    prior_mass: np.ndarray
    empirical_mass: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.prior_mass < 0) or np.any(self.prior_mass > 1) or self.prior_mass.sum() > 1 + 1e-9:
            raise ValueError("prior masses must form a (sub-)probability vector")


def export_codebook(model: SchemeModel, stage: str = "first", x_samples=None) -> CodebookExport:
    """Uninformed reconstructions and prior masses of the first stage.

    ``stage`` is "v" (joint) or "w" (layered); "first" picks the right one.
    Pass ``x_samples`` to also report empirical index frequencies.
    """
    first = "v" if model.kind == "joint" else "w"
    if stage == "first":
        stage = first
    if stage != first:
        raise ValueError(f"the {model.kind} scheme has an uninformed codebook only for stage {first!r}")
    k = model.stage_sizes[0]
    recon = decode_uninformed(model, np.arange(k))
    mass = np.exp(model.prior_logprobs("prior" if model.kind == "joint" else "prior_w").value[0])
    empirical = None
    if x_samples is not None:
        codes = encode(model, np.asarray(x_samples, dtype=np.float64))[0]
        empirical = np.bincount(codes, minlength=k) / len(codes)
    return CodebookExport(stage, recon, mass, empirical)


@dataclass
class DecoderCurve:
    w: int
    u: int
    y: np.ndarray
    x_hat2: np.ndarray


def export_decoder_curves(
    model: SchemeModel, pairs: Sequence[tuple[int, int]], y_lo: float, y_hi: float, step: float
) -> list[DecoderCurve]:
    """Informed-decoder output over a y grid for each (w, u) pair.

    For the joint scheme the pair is (v, 0).
    """
    y = make_grid(y_lo, y_hi, step)
    curves = []
    for w, u in pairs:
        code = (np.full(y.size, w),) if model.kind == "joint" else (np.full(y.size, w), np.full(y.size, u))
        vals = decode_informed(model, code, y)
        if not np.all(np.isfinite(vals)):
            raise de.NonFiniteError(f"decoder curve ({w}, {u}) is not finite")
        curves.append(DecoderCurve(int(w), int(u), y, vals))
    return curves


def used_pairs(model: SchemeModel, x_samples) -> list[tuple[int, int]]:
    """Distinct (w, u) (or (v, 0)) codes emitted on ``x_samples``, sorted."""
    codes = encode(model, np.asarray(x_samples, dtype=np.float64))
    second = codes[1] if len(codes) > 1 else np.zeros_like(codes[0])
    return sorted({(int(a), int(b)) for a, b in zip(codes[0], second)})


@dataclass
class VizArtifacts:
    maps: dict[str, QuantizationMap] = field(default_factory=dict)
    codebook: CodebookExport | None = None
    curves: list[DecoderCurve] = field(default_factory=list)


def build_artifacts(model: SchemeModel, grid=None, x_samples=None, max_curves: int = 64) -> VizArtifacts:
    lo, hi, step = default_grid() if grid is None else grid
    maps = stage_maps(model, lo, hi, step)
    pairs = used_pairs(model, maps["v" if model.kind == "joint" else "w"].grid)[:max_curves]
    curves = export_decoder_curves(model, pairs, lo, hi, (hi - lo) / 200.0)
    return VizArtifacts(maps, export_codebook(model, x_samples=x_samples), curves)


def _num(v: float) -> str:
    return repr(float(v))


def emit_csv(artifacts: VizArtifacts, path) -> dict[str, str]:
    """Write boundaries.csv, codebook.csv and curves.csv into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    out = {k: os.path.join(path, f"{k}.csv") for k in ("boundaries", "codebook", "curves")}
    with open(out["boundaries"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(BOUNDARY_HEADER)
        for stage, qmap in artifacts.maps.items():
            for idx, runs in qmap.intervals.items():
                for lo, hi, _ in runs:
                    wr.writerow([stage, idx, _num(lo), _num(hi)])
    with open(out["codebook"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CODEBOOK_HEADER)
        cb = artifacts.codebook
        if cb is not None:
            for i, (r, m) in enumerate(zip(cb.reconstruction, cb.prior_mass)):
                emp = "" if cb.empirical_mass is None else _num(cb.empirical_mass[i])
                wr.writerow([cb.stage, i, _num(r), _num(m), emp])
    with open(out["curves"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CURVE_HEADER)
        for c in artifacts.curves:
            for yv, xv in zip(c.y, c.x_hat2):
                wr.writerow([c.w, c.u, _num(yv), _num(xv)])
    return out


def read_csv(path) -> dict[str, list[dict]]:
    """Load the three CSVs of :func:`emit_csv` back as rows of floats/ints."""
    tables = {}
    for name in ("boundaries", "codebook", "curves"):
        with open(os.path.join(path, f"{name}.csv"), newline="") as fh:
            rows = []
            for row in csv.DictReader(fh):
                rows.append({k: _parse(k, v) for k, v in row.items()})
            tables[name] = rows
    return tables


def _parse(key: str, value: str):
    if key == "stage":
        return value
    if key in ("index", "w", "u"):
        return int(value)
    return None if value == "" else float(value)


# ---------------------------------------------------------------------------
# SVG


_W, _H, _PAD = 900, 360, 40
_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _scale(v, lo, hi, a, b):
    if hi == lo:
        return 0.5 * (a + b)
    return a + (v - lo) * (b - a) / (hi - lo)


def emit_svg(artifacts: VizArtifacts, path) -> None:
    """Two panels: left, first-stage boundaries with codebook stalks scaled by
    prior mass; right, informed-decoder curves with second-stage boundaries."""
    half = _W // 2
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
    ]
    panels = [(0, "codebook and first-stage boundaries"), (half, "informed decoder curves")]
    for x0, title in panels:
        parts.append(
            f'<rect x="{x0 + _PAD}" y="{_PAD}" width="{half - 2 * _PAD}" height="{_H - 2 * _PAD}" '
            'fill="none" stroke="black"/>'
        )
        parts.append(f'<text x="{x0 + _PAD}" y="{_PAD - 10}" font-size="13">{escape(title)}</text>')
    maps = list(artifacts.maps.values())
    if maps:
        grid = maps[0].grid
        lo, hi = float(grid[0]), float(grid[-1])
        for panel, qmap in ((0, maps[0]), (half, maps[-1])):
            for b in qmap.boundaries():
                px = _scale(b, lo, hi, panel + _PAD, panel + half - _PAD)
                parts.append(
                    f'<line x1="{px:.2f}" y1="{_PAD}" x2="{px:.2f}" y2="{_H - _PAD}" '
                    'stroke="red" stroke-dasharray="4,3" stroke-width="0.8"/>'
                )
        cb = artifacts.codebook
        if cb is not None:
            top = max(float(cb.prior_mass.max()), 1e-12)
            for r, m in zip(cb.reconstruction, cb.prior_mass):
                if not lo <= r <= hi:
                    continue
                px = _scale(r, lo, hi, _PAD, half - _PAD)
                py = _scale(m, 0.0, top, _H - _PAD, _PAD + 10)
                parts.append(
                    f'<line x1="{px:.2f}" y1="{_H - _PAD}" x2="{px:.2f}" y2="{py:.2f}" stroke="black"/>'
                    f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" fill="black"/>'
                )
        for i, c in enumerate(artifacts.curves):
            pts = " ".join(
                f"{_scale(yv, lo, hi, half + _PAD, _W - _PAD):.2f},"
                f"{_scale(np.clip(xv, lo, hi), lo, hi, _H - _PAD, _PAD):.2f}"
                for yv, xv in zip(c.y, c.x_hat2)
            )
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{_PALETTE[i % len(_PALETTE)]}" stroke-width="1">'
                f"<title>w={c.w} u={c.u}</title></polyline>"
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
