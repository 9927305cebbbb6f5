"""Arithmetic coding of hard code indices under the trained entropy models.

The coder keeps a 32-bit ``[low, high]`` interval. It supports
frequency tables with totals up to 2^30 and emits bits MSB-first.
Decoding re-encodes the recovered symbols and insists on a byte-identical
payload, so a damaged stream raises instead of decoding to garbage
(unless the damage happens to produce another valid stream).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .schemes import SchemeModel, stage1_log2_probs, stage2_log2_probs
from .source import CorrelationModel, sample_batch
from .trainer import hard_codes

MAGIC = b"HBAC0001"
MIN_PRECISION, MAX_PRECISION = 12, 30
DEFAULT_PRECISION = 16

STATE_BITS = 32
_FULL = 1 << STATE_BITS
_MASK = _FULL - 1
_HALF = _FULL >> 1
_QUARTER = _HALF >> 1


class CorruptStreamError(ValueError):
    """The payload is not a valid encoding under the given models."""


class UnsupportedStageError(ValueError):
    """Operational coding was requested for the ideal Slepian-Wolf stage."""


@dataclass(frozen=True)
class CdfModel:
    """Integer cumulative frequencies ``cumulative[0] = 0 < ... < cumulative[K] = 2^precision``."""

    cumulative: np.ndarray
    precision: int

    def __post_init__(self):
        c = np.asarray(self.cumulative, dtype=np.int64)
        object.__setattr__(self, "cumulative", c)
        if c.ndim != 1 or len(c) < 2:
            raise ValueError("cumulative table needs at least one symbol")
        if c[0] != 0 or c[-1] != 1 << self.precision:
            raise ValueError("cumulative table must run from 0 to 2^precision")
        if np.any(np.diff(c) < 1):
            raise ValueError("every symbol needs frequency >= 1")

    @property
    def num_symbols(self) -> int:
        return len(self.cumulative) - 1

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cumulative)

    @property
    def probs(self) -> np.ndarray:
        return self.freqs / float(1 << self.precision)

    def code_length(self, symbols) -> float:
        """Ideal code length in bits, sum of -log2 of the quantized probabilities."""
        return float(-np.log2(self.probs[np.asarray(symbols, dtype=np.int64)]).sum())


def build_cdf(probs, precision_bits: int = DEFAULT_PRECISION) -> CdfModel:
    """Quantize a probability vector to frequencies summing to 2^precision_bits.

    Largest-remainder rounding of ``p * 2^P``. Symbols that round to zero
    are raised to 1 and the deficit is taken, one count at a time, from the
    largest frequencies. Every reconstructed probability is within 2^(1-P)
    of its input.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not MIN_PRECISION <= precision_bits <= MAX_PRECISION:
        raise ValueError(f"precision must lie in [{MIN_PRECISION}, {MAX_PRECISION}], got {precision_bits}")
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be a probability vector")
    total = 1 << precision_bits
    k = p.size
    if k > total:
        raise ValueError(f"{k} symbols do not fit in precision {precision_bits}")
    scaled = p * total
    freqs = np.floor(scaled).astype(np.int64)
    short = total - int(freqs.sum())
    if short > 0:
        # stable sort keeps ties at the smallest index
        order = np.argsort(-(scaled - freqs), kind="stable")
        freqs[order[:short]] += 1
    elif short < 0:  # only possible through floating-point slack in p.sum()
        order = np.argsort(-freqs, kind="stable")
        freqs[order[:-short]] -= 1
    deficit = int(np.count_nonzero(freqs < 1))
    if deficit:
        freqs[freqs < 1] = 1
        while deficit:
            order = np.argsort(-freqs, kind="stable")
            donors = [i for i in order[:deficit] if freqs[i] > 1]
            for i in donors:
                freqs[i] -= 1
            deficit -= len(donors)
    return CdfModel(np.concatenate([[0], np.cumsum(freqs)]), precision_bits)


@dataclass(frozen=True)
class Bitstream:
    """Packed payload bits, MSB-first, zero-padded to a byte boundary."""

    data: bytes
    n_bits: int

    def __post_init__(self):
        if self.n_bits < 0 or len(self.data) != (self.n_bits + 7) // 8:
            raise ValueError("bit length does not match the buffer")

    def to_bytes(self, count: int) -> bytes:
        """Serialize as magic, 8-byte big-endian symbol count, payload."""
        return MAGIC + struct.pack(">Q", count) + self.data

    @staticmethod
    def from_bytes(blob: bytes) -> tuple["Bitstream", int]:
        """Parse :meth:`to_bytes` output; returns (stream, symbol count).

        The exact bit length is not stored, so the stream covers whole bytes.
        """
        if len(blob) < 16 or blob[:8] != MAGIC:
            raise CorruptStreamError("missing HBAC0001 header")
        (count,) = struct.unpack(">Q", blob[8:16])
        payload = bytes(blob[16:])
        return Bitstream(payload, 8 * len(payload)), count


def _as_models(models, n: int) -> Sequence[CdfModel]:
    if isinstance(models, CdfModel):
        return [models] * n
    models = list(models)
    if len(models) != n:
        raise ValueError(f"need one model per symbol: {len(models)} models for {n} symbols")
    return models


def _check_precision(models: Sequence[CdfModel]) -> None:
    for m in models:
        if m.precision > MAX_PRECISION:
            raise ValueError("precision exceeds the coder's 30-bit limit")


def ac_encode(symbols, models) -> Bitstream:
    """Arithmetic-code ``symbols``; ``models`` is one CdfModel or one per position."""
    symbols = [int(s) for s in np.asarray(symbols, dtype=np.int64).ravel()]
    models = _as_models(models, len(symbols))
    _check_precision(models)
    low, high, pending = 0, _MASK, 0
    bits: list[int] = []
    for s, m in zip(symbols, models):
        if not 0 <= s < m.num_symbols:
            raise ValueError(f"symbol {s} outside alphabet of size {m.num_symbols}")
        c = m.cumulative
        span = high - low + 1
        high = low + (int(c[s + 1]) * span >> m.precision) - 1
        low = low + (int(c[s]) * span >> m.precision)
        while not (low ^ high) & _HALF:
            bit = low >> (STATE_BITS - 1)
            bits.append(bit)
            bits.extend([bit ^ 1] * pending)
            pending = 0
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while low & ~high & _QUARTER:
            pending += 1
            low = (low << 1) ^ _HALF
            high = ((high ^ _HALF) << 1) | _HALF | 1
    if symbols:
        # Name the dyadic interval [1/4, 1/2) or [1/2, 3/4), which lies inside
        # [low, high]; its width bounds the length below by the code length.
        bit = 0 if low < _QUARTER else 1
        bits.append(bit)
        bits.extend([bit ^ 1] * (pending + 1))
    packed = np.packbits(np.array(bits, dtype=np.uint8)).tobytes() if bits else b""
    return Bitstream(packed, len(bits))


def ac_decode(bits: Bitstream, models, n: int, *, verify: bool = True) -> np.ndarray:
    """Invert :func:`ac_encode` for ``n`` symbols under the same models.

    Reading past the payload yields zeros. With ``verify`` the decoded
    symbols are re-encoded and must reproduce the payload exactly, otherwise
    :class:`CorruptStreamError` is raised.
    """
    models = _as_models(models, n)
    _check_precision(models)
    if n == 0:
        if bits.data:
            raise CorruptStreamError("non-empty payload for zero symbols")
        return np.zeros(0, dtype=np.int64)
    stream = np.unpackbits(np.frombuffer(bits.data, dtype=np.uint8))[: bits.n_bits].tolist()
    limit = len(stream)
    pos = 0

    def read() -> int:
        nonlocal pos
        pos += 1
        return stream[pos - 1] if pos <= limit else 0

    code = 0
    for _ in range(STATE_BITS):
        code = (code << 1) | read()
    low, high = 0, _MASK
    out = np.empty(n, dtype=np.int64)
    for i, m in enumerate(models):
        c = m.cumulative
        span = high - low + 1
        # largest s with floor(c[s] * span / 2^P) <= code - low
        offset = code - low
        value = ((offset + 1) << m.precision) - 1
        s = int(np.searchsorted(c, value // span, side="right")) - 1
        while s > 0 and (int(c[s]) * span >> m.precision) > offset:
            s -= 1
        while s + 1 < m.num_symbols and (int(c[s + 1]) * span >> m.precision) <= offset:
            s += 1
        out[i] = s
        high = low + (int(c[s + 1]) * span >> m.precision) - 1
        low = low + (int(c[s]) * span >> m.precision)
        if not low <= code <= high:
            raise CorruptStreamError(f"decoder left the coding interval at symbol {i}")
        while not (low ^ high) & _HALF:
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
            code = ((code << 1) & _MASK) | read()
        while low & ~high & _QUARTER:
            low = (low << 1) ^ _HALF
            high = ((high ^ _HALF) << 1) | _HALF | 1
            code = (code & _HALF) | ((code << 1) & (_MASK >> 1)) | read()
    if verify:
        again = ac_encode(out, models)
        if again.data != bits.data:
            raise CorruptStreamError("payload is not the encoding of the decoded symbols")
    return out


def write_stream(path, symbols, models) -> Bitstream:
    """Encode ``symbols`` and write the HBAC0001 file."""
    stream = ac_encode(symbols, models)
    with open(path, "wb") as fh:
        fh.write(stream.to_bytes(len(np.ravel(symbols))))
    return stream


def read_stream(path, models) -> np.ndarray:
    """Read an HBAC0001 file and decode it; ``models`` as in :func:`ac_decode`."""
    with open(path, "rb") as fh:
        stream, count = Bitstream.from_bytes(fh.read())
    return ac_decode(stream, models, count)


# ---------------------------------------------------------------------------
# operational rates of trained models


@dataclass
class OperationalRate:
    """Measured bits per sample next to the cross-entropy rates they realize."""

    n: int
    measured_bits: dict[str, float] = field(default_factory=dict)
    cross_entropy_bits: dict[str, float] = field(default_factory=dict)
    lossless: bool = True

    @property
    def measured_total(self) -> float:
        return float(sum(self.measured_bits.values()))

    @property
    def cross_entropy_total(self) -> float:
        return float(sum(self.cross_entropy_bits.values()))


def _cdf_from_log2(log2_probs: np.ndarray, precision: int) -> CdfModel:
    p = np.exp2(log2_probs - log2_probs.max())
    return build_cdf(p / p.sum(), precision)


def operational_rate(
    model: SchemeModel,
    correlation: CorrelationModel,
    n: int,
    rng: np.random.Generator,
    *,
    stages: Sequence[str] | None = None,
    precision_bits: int = DEFAULT_PRECISION,
) -> OperationalRate:
    """Entropy-code ``n`` hard indices and measure the bits actually emitted.

    The samples are drawn exactly as :func:`evaluate` draws them, so the
    same ``rng`` state gives directly comparable numbers. Stage 2 of the
    marginal scheme uses q(u|w) with w known from stage 1. Stage 2 of the
    conditional scheme is an ideal Slepian-Wolf code and is refused.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    all_stages = ("stage1",) if model.kind == "joint" else ("stage1", "stage2")
    stages = all_stages if stages is None else tuple(stages)
    unknown = set(stages) - set(all_stages)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)} for the {model.kind} scheme")
    if model.kind == "conditional" and "stage2" in stages:
        raise UnsupportedStageError(
            "the conditional stage-2 rate is an ideal Slepian-Wolf rate; use sw_ideal_rate"
        )
    batch = sample_batch(correlation, n, rng)
    hc = hard_codes(model, batch.x, batch.y)
    report = OperationalRate(n=n)
    if "stage1" in stages:
        q1 = _cdf_from_log2(stage1_log2_probs(model), precision_bits)
        first = hc.codes[0]
        stream = ac_encode(first, q1)
        report.lossless &= bool(np.array_equal(ac_decode(stream, q1, n), first))
        report.measured_bits["stage1"] = stream.n_bits / n
        report.cross_entropy_bits["stage1"] = float(hc.stage1_bits.mean())
    if "stage2" in stages:
        w, u = hc.codes
        table = stage2_log2_probs(model, np.arange(model.cfg.k_w))
        per_w = [_cdf_from_log2(row, precision_bits) for row in table]
        models = [per_w[i] for i in w]
        stream = ac_encode(u, models)
        report.lossless &= bool(np.array_equal(ac_decode(stream, models, n), u))
        report.measured_bits["stage2"] = stream.n_bits / n
        report.cross_entropy_bits["stage2"] = float(hc.stage2_bits.mean())
    return report


def sw_ideal_rate(model: SchemeModel, correlation: CorrelationModel, n: int, rng: np.random.Generator) -> float:
    """Mean -log2 q(u|w, y) over ``n`` fresh samples; no bitstream is produced."""
    if model.kind != "conditional":
        raise TypeError(f"the ideal Slepian-Wolf rate applies to the conditional scheme, not {model.kind}")
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = sample_batch(correlation, n, rng)
    return float(hard_codes(model, batch.x, batch.y).stage2_bits.mean())
