"""Adam training, evaluation with cross-entropy rate accounting, and lambda sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import diffengine as de
from .bounds import RdPoint, to_db
from .sampling import split_streams
from .schemes import (
    LossBreakdown,
    SchemeConfig,
    SchemeModel,
    decode_informed,
    decode_uninformed,
    draw_noise,
    encode,
    hard_code_loss,
    make_model,
    scheme_loss,
    stage1_log2_probs,
    stage2_log2_probs,
)
from .source import CorrelationModel, sample_batch

log = logging.getLogger(__name__)

RD_CSV_HEADER = [
    "scheme", "lambda", "seed", "rate_bits", "rate_stage1_bits", "rate_stage2_bits", "d1_db", "d2_db", "weighted_db",
]
HISTORY_CSV_HEADER = ["epoch", "rate_nats", "d1_mse", "d2_mse", "total"]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameters")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    correlation: CorrelationModel = field(default_factory=CorrelationModel)
    epochs: int = 500
    steps_per_epoch: int = 100
    batch_size: int = 1024
    lr: float = 1e-4
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # Optional final phase: entropy models and decoders refit on hard codes.
    refit_steps: int = 0
    refit_lr: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, steps_per_epoch and batch_size >= 1")
        if not 0 < self.lr <= 1 or not 0 < self.refit_lr <= 1:
            raise ValueError(f"learning rates must lie in (0, 1], got {self.lr}, {self.refit_lr}")
        if self.refit_steps < 0:
            raise ValueError("refit_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "scheme" in d:
            d["scheme"] = SchemeConfig.from_dict(d["scheme"])
        if "correlation" in d:
            d["correlation"] = CorrelationModel(**d["correlation"])
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: SchemeModel, cause: Exception):
        super().__init__(f"non-finite value at step {step}: {cause}")
        self.step = step
        self.last_good = last_good


def temperature_at(cfg: SchemeConfig, step: int, total_steps: int) -> float:
    """Fixed temperature, or an exponential anneal to ``temperature_final``."""
    if cfg.temperature_final is None or total_steps <= 1:
        return cfg.temperature
    frac = min(step / (total_steps - 1), 1.0)
    return cfg.temperature * (cfg.temperature_final / cfg.temperature) ** frac


def train(kind: str, cfg: TrainConfig, callback=None) -> tuple[SchemeModel, list[dict]]:
    """Train one scheme from scratch; a pure function of ``cfg``.

    Returns the trained model and per-epoch means of the loss terms.
    ``callback(epoch, model, record)`` runs after every epoch if given; it
    must not touch the model's parameters.
    """
    streams = split_streams(cfg.seed)
    model = make_model(kind, cfg.scheme, seed=cfg.seed, rng=streams["init"])
    state = AdamState(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    sampled = model.mode == "sampled"
    total_steps = cfg.epochs * cfg.steps_per_epoch
    last_good = model.copy()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = np.zeros(5)
        for _ in range(cfg.steps_per_epoch):
            batch = sample_batch(cfg.correlation, cfg.batch_size, streams["data"])
            noise = None
            if sampled:
                noise = draw_noise(model, cfg.batch_size, streams["gumbel_stage1"], streams["gumbel_stage2"])
            tape = de.GradientTape()
            leaves = tape.watch_all(model.params)
            try:
                lb = scheme_loss(
                    model, batch, params=leaves, noise=noise,
                    temperature=temperature_at(cfg.scheme, step, total_steps),
                )
                grads = tape.backward(lb.tensor)
                for g in grads.values():
                    de._checked(g, "backward")
            except de.NonFiniteError as exc:
                raise TrainingDiverged(step, last_good, exc) from exc
            adam_step(state, model.params, grads)
            sums += (lb.rate_nats, lb.d1_mse, lb.d2_mse, lb.weighted_mse, lb.total)
            step += 1
        means = sums / cfg.steps_per_epoch
        history.append(
            {
                "epoch": epoch,
                "rate_nats": means[0],
                "d1_mse": means[1],
                "d2_mse": means[2],
                "weighted_mse": means[3],
                "total": means[4],
            }
        )
        last_good = model.copy()
        if callback is not None:
            callback(epoch, model, history[-1])
    if cfg.refit_steps:
        refit_on_hard_codes(model, cfg, streams["data"])
    model.history = history
    return model, history


def refit_on_hard_codes(model: SchemeModel, cfg: TrainConfig, rng: np.random.Generator) -> LossBreakdown | None:
    """Fit entropy models and decoders to the argmax codes, encoders frozen.

    Training sees relaxed samples, so the learned priors describe soft
    codes; this phase aligns them (and the decoders) with the hard indices
    that evaluation and the entropy coder actually use. Each step is an
    Adam update on ``hard_code_loss`` over a fresh batch.
    """
    names = [n for n in model.params if not n.startswith("enc")]
    trainable = {n: model.params[n] for n in names}  # shares storage with the model
    state = AdamState(cfg.refit_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    lb = None
    for step in range(cfg.refit_steps):
        batch = sample_batch(cfg.correlation, cfg.batch_size, rng)
        tape = de.GradientTape()
        leaves = {**model.params, **tape.watch_all(trainable)}
        try:
            lb = hard_code_loss(model, batch, params=leaves)
            grads = tape.backward(lb.tensor)
            for g in grads.values():
                de._checked(g, "backward")
        except de.NonFiniteError as exc:
            raise TrainingDiverged(cfg.epochs * cfg.steps_per_epoch + step, model.copy(), exc) from exc
        adam_step(state, trainable, grads)
    return lb


def write_history_csv(history: Sequence[Mapping], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_CSV_HEADER)
        for h in history:
            writer.writerow([h["epoch"]] + [repr(float(h[k])) for k in HISTORY_CSV_HEADER[1:]])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rate_bits_total: float
    rate_bits_stage1: float
    rate_bits_stage2: float
    d1_db: float
    d2_db: float
    weighted_db: float
    n_samples: int
    beta: float = 0.0
    d1_mse: float = 0.0
    d2_mse: float = 0.0
    weighted_mse: float = 0.0
    weighted_mse_stderr: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def weighted_db_stderr(self) -> float:
        """Standard error of ``weighted_db`` by the delta method."""
        return 10.0 / math.log(10.0) * self.weighted_mse_stderr / self.weighted_mse


@dataclass
class HardCodes:
    """Hard indices and reconstructions of one evaluation sample."""

    x: np.ndarray
    y: np.ndarray
    codes: tuple
    stage1_bits: np.ndarray
    stage2_bits: np.ndarray
    xhat1: np.ndarray
    xhat2: np.ndarray


def hard_codes(model: SchemeModel, x: np.ndarray, y: np.ndarray, chunk: int = 20000) -> HardCodes:
    parts = []
    q1 = stage1_log2_probs(model)
    for lo in range(0, len(x), chunk):
        xs, ys = x[lo : lo + chunk], y[lo : lo + chunk]
        codes = encode(model, xs)
        bits1 = -q1[codes[0]]
        if model.kind == "joint":
            bits2 = np.zeros(len(xs))
        else:
            w, u = codes
            q2 = stage2_log2_probs(model, w, ys if model.kind == "conditional" else None)
            bits2 = -q2[np.arange(len(xs)), u]
        parts.append((codes, bits1, bits2, decode_uninformed(model, codes), decode_informed(model, codes, ys)))
    codes = tuple(np.concatenate([p[0][i] for p in parts]) for i in range(len(parts[0][0])))
    return HardCodes(
        x, y, codes,
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        np.concatenate([p[4] for p in parts]),
    )


def evaluate(model: SchemeModel, correlation: CorrelationModel, n: int, rng: np.random.Generator) -> EvalReport:
    """Rates under the trained entropy models and MSEs of both decoders.

    The conditional scheme's stage-2 rate is the ideal Slepian-Wolf
    cross-entropy -log2 q(u|w, y); no bitstream is produced for it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = sample_batch(correlation, n, rng)
    hc = hard_codes(model, batch.x, batch.y)
    beta = model.cfg.beta
    e1 = (batch.x - hc.xhat1) ** 2
    e2 = (batch.x - hc.xhat2) ** 2
    per_sample = beta * e1 + (1.0 - beta) * e2
    mse1, mse2 = float(e1.mean()), float(e2.mean())
    weighted = beta * mse1 + (1.0 - beta) * mse2
    r1, r2 = float(hc.stage1_bits.mean()), float(hc.stage2_bits.mean())
    return EvalReport(
        rate_bits_total=r1 + r2,
        rate_bits_stage1=r1,
        rate_bits_stage2=r2,
        d1_db=float(to_db(mse1)),
        d2_db=float(to_db(mse2)),
        weighted_db=float(to_db(weighted)),
        n_samples=n,
        beta=beta,
        d1_mse=mse1,
        d2_mse=mse2,
        weighted_mse=weighted,
        weighted_mse_stderr=float(per_sample.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
    )


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class RdCurve:
    points: list[RdPoint] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RD_CSV_HEADER)
            for p in self.points:
                m = p.metadata
                writer.writerow(
                    [m["scheme"], repr(float(m["lambda"])), m["seed"]]
                    + [repr(float(v)) for v in (
                        p.rate_bits, m["rate_stage1_bits"], m["rate_stage2_bits"], p.d1_db, p.d2_db, p.weighted_db,
                    )]
                )


def _run_one(args) -> dict:
    kind, cfg, eval_samples, lam, seed = args
    run_cfg = replace(cfg, seed=seed, scheme=replace(cfg.scheme, lam=lam))
    started = time.perf_counter()
    try:
        model, _ = train(kind, run_cfg)
        report = evaluate(model, run_cfg.correlation, eval_samples, split_streams(seed)["eval"])
    except Exception as exc:  # one failed run must not sink the sweep
        return {"lambda": lam, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    return {
        "lambda": lam,
        "seed": seed,
        "report": report,
        "model": model,
        "seconds": time.perf_counter() - started,
    }


def sweep(
    kind: str,
    base_cfg: TrainConfig,
    lambdas: Sequence[float],
    seeds: Sequence[int],
    *,
    eval_samples: int = 100_000,
    jobs: int = 1,
    keep_models: bool = False,
) -> RdCurve:
    """Train and evaluate one model per (lambda, seed); runs are independent."""
    if not lambdas or not seeds:
        raise ValueError("lambdas and seeds must be non-empty")
    tasks = [(kind, base_cfg, eval_samples, float(lam), int(seed)) for lam in lambdas for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]

    curve = RdCurve()
    for res in results:
        if "error" in res:
            log.warning("run lambda=%s seed=%s failed: %s", res["lambda"], res["seed"], res["error"])
            curve.failures.append(res)
            continue
        rep = res["report"]
        meta = {
            "scheme": kind,
            "lambda": res["lambda"],
            "seed": res["seed"],
            "rate_stage1_bits": rep.rate_bits_stage1,
            "rate_stage2_bits": rep.rate_bits_stage2,
            "report": rep,
        }
        if keep_models:
            meta["model"] = res["model"]
        curve.points.append(RdPoint(rep.rate_bits_total, rep.d1_db, rep.d2_db, rep.weighted_db, meta))
    return curve
