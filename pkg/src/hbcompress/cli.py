"""Command-line entry point: ``hbcompress <command> ...``.

Commands: bounds, train, sweep, eval, viz, codec-check. Each writes its
artifacts plus a ``manifest.json`` into the directory given by ``--out``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import subprocess
import sys
import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import __version__
from .bounds import GaussSetup, bound_curve
from .codec import operational_rate, sw_ideal_rate
from .sampling import split_streams
from .schemes import SCHEME_KINDS, SchemeConfig, load_model
from .source import CorrelationModel
from .trainer import TrainConfig, evaluate, sweep, train, write_history_csv
from .viz import build_artifacts, default_grid, detect_binning, emit_csv, emit_svg

log = logging.getLogger("hbcompress")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"scheme", "correlation", "seed"}


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


@dataclass
class RunConfig:
    """Everything one run needs; serialized as strict JSON.

    ``train`` holds the TrainConfig fields other than scheme, correlation
    and seed, which live at the top level.
    """

    kind: str = "marginal"
    correlation: CorrelationModel = field(default_factory=CorrelationModel)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    train: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    lambdas: list[float] = field(default_factory=list)
    eval_samples: int = 100_000
    out: str = "runs/default"

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"kind must be one of {SCHEME_KINDS}, got {self.kind!r}")
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        self.lambdas = [float(v) for v in self.lambdas]
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambdas must be non-negative")
        if self.eval_samples < 1:
            raise ValueError("eval_samples must be >= 1")
        self.train_config(self.seeds[0])  # validates the train block

    def train_config(self, seed: int, lam: float | None = None) -> TrainConfig:
        scheme = self.scheme if lam is None else SchemeConfig.from_dict({**self.scheme.to_dict(), "lam": lam})
        return TrainConfig(scheme=scheme, correlation=self.correlation, seed=seed, **self.train)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "correlation": {"sigma_x2": self.correlation.sigma_x2, "sigma_n2": self.correlation.sigma_n2},
            "scheme": self.scheme.to_dict(),
            "train": dict(self.train),
            "seeds": list(self.seeds),
            "lambdas": list(self.lambdas),
            "eval_samples": self.eval_samples,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "correlation" in d:
            corr = d["correlation"]
            bad = set(corr) - {"sigma_x2", "sigma_n2"}
            if bad:
                raise ValueError(f"unknown correlation keys: {sorted(bad)}")
            d["correlation"] = CorrelationModel(**corr)
        if "scheme" in d:
            d["scheme"] = SchemeConfig.from_dict(d["scheme"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def load_config(path: str | None) -> RunConfig:
    """Read a RunConfig; ``HB_SEED`` in the environment replaces the seed list."""
    try:
        if path is None:
            cfg = RunConfig()
        else:
            with open(path) as fh:
                cfg = RunConfig.from_json(fh.read())
        if os.environ.get("HB_SEED"):
            cfg.seeds = [int(os.environ["HB_SEED"])]
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {path}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True, text=True, timeout=5
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"hbcompress {__version__}" + (f" ({rev})" if rev else "")


def write_manifest(out: str, command: str, argv: Sequence[str], config: dict, timings: dict) -> str:
    os.makedirs(out, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "version": _version_string(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings": timings,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def parse_range(text: str) -> np.ndarray:
    """``lo:hi:step`` to an inclusive grid; step must be positive."""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise UsageError(f"expected lo:hi:step, got {text!r}") from exc
    if not step > 0:
        raise UsageError(f"step must be positive, got {step}")
    if hi < lo:
        raise UsageError(f"need lo <= hi, got {lo} > {hi}")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def _parse_list(text: str, kind=float) -> list:
    try:
        values = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}") from exc
    if not values:
        raise UsageError("empty list")
    return values


def _write_json(path: str, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _correlation_from(args, cfg: RunConfig | None) -> CorrelationModel:
    if getattr(args, "sigma_x2", None) is not None or getattr(args, "sigma_n2", None) is not None:
        base = cfg.correlation if cfg else CorrelationModel()
        return CorrelationModel(
            args.sigma_x2 if args.sigma_x2 is not None else base.sigma_x2,
            args.sigma_n2 if args.sigma_n2 is not None else base.sigma_n2,
        )
    return cfg.correlation if cfg else CorrelationModel()


def _load_checkpoint(path: str):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise UsageError(f"model not found: {path}") from exc
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid model file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_bounds(args) -> int:
    try:
        setup = GaussSetup(args.sigma_x2, args.sigma_n2)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not 0.0 <= args.beta <= 1.0:
        raise UsageError(f"beta must lie in [0, 1], got {args.beta}")
    rates = parse_range(args.rates)
    if rates[0] < 0:
        raise UsageError("rates must be non-negative")
    started = time.perf_counter()
    curve = bound_curve(setup, args.beta, rates)
    os.makedirs(args.out, exist_ok=True)
    curve.write_csv(os.path.join(args.out, "bounds.csv"))
    config = {"sigma_x2": args.sigma_x2, "sigma_n2": args.sigma_n2, "beta": args.beta, "rates": args.rates}
    write_manifest(args.out, "bounds", args.argv, config, {"total_s": time.perf_counter() - started})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.scheme:
        cfg.kind = args.scheme
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    timings = {}
    for seed in cfg.seeds:
        started = time.perf_counter()
        tcfg = cfg.train_config(seed)
        model, history = train(cfg.kind, tcfg)
        timings[f"train_seed{seed}_s"] = time.perf_counter() - started
        suffix = f"_seed{seed}" if len(cfg.seeds) > 1 else ""
        model.save(os.path.join(out, f"model{suffix}.json"))
        write_history_csv(history, os.path.join(out, f"history{suffix}.csv"))
        report = evaluate(model, cfg.correlation, cfg.eval_samples, split_streams(seed)["eval"])
        _write_json(os.path.join(out, f"eval{suffix}.json"), report.to_dict())
    write_manifest(out, "train", args.argv, cfg.to_dict(), timings)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.scheme:
        cfg.kind = args.scheme
    if args.lambdas:
        cfg.lambdas = _parse_list(args.lambdas, float)
    if args.seeds:
        cfg.seeds = _parse_list(args.seeds, int)
    if not cfg.lambdas:
        raise UsageError("no lambdas given (config 'lambdas' or --lambdas)")
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    started = time.perf_counter()
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    curve = sweep(
        cfg.kind, cfg.train_config(cfg.seeds[0]), cfg.lambdas, cfg.seeds, eval_samples=cfg.eval_samples, jobs=jobs
    )
    curve.write_csv(os.path.join(out, "rd.csv"))
    if curve.failures:
        _write_json(os.path.join(out, "failures.json"), curve.failures)
    write_manifest(out, "sweep", args.argv, cfg.to_dict(), {"total_s": time.perf_counter() - started, "jobs": jobs})
    if not curve.points:
        log.error("every run failed")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    model = _load_checkpoint(args.model)
    correlation = _correlation_from(args, cfg)
    seed = cfg.seeds[0] if cfg else args.seed
    if os.environ.get("HB_SEED"):
        seed = int(os.environ["HB_SEED"])
    started = time.perf_counter()
    report = evaluate(model, correlation, args.samples, split_streams(seed)["eval"])
    payload = report.to_dict()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval.json"), payload)
        config = {"model": args.model, "samples": args.samples, "seed": seed,
                  "correlation": {"sigma_x2": correlation.sigma_x2, "sigma_n2": correlation.sigma_n2}}
        write_manifest(args.out, "eval", args.argv, config, {"total_s": time.perf_counter() - started})
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_viz(args) -> int:
    model = _load_checkpoint(args.model)
    cfg = load_config(args.config) if args.config else None
    correlation = _correlation_from(args, cfg)
    grid = default_grid(correlation.sigma_x2)
    if args.grid:
        g = parse_range(args.grid)
        if len(g) < 2:
            raise UsageError("grid needs at least two points")
        grid = (float(g[0]), float(g[-1]), float(g[1] - g[0]))
    started = time.perf_counter()
    rng = split_streams(args.seed)["eval"]
    x = np.sqrt(correlation.sigma_x2) * rng.standard_normal(args.samples)
    artifacts = build_artifacts(model, grid, x_samples=x)
    os.makedirs(args.out, exist_ok=True)
    emit_csv(artifacts, args.out)
    emit_svg(artifacts, os.path.join(args.out, "figure.svg"))
    binning = {stage: detect_binning(m) for stage, m in artifacts.maps.items()}
    _write_json(os.path.join(args.out, "binning.json"), {k: [list(b) for b in v] for k, v in binning.items()})
    config = {"model": args.model, "grid": list(grid), "samples": args.samples, "seed": args.seed}
    write_manifest(args.out, "viz", args.argv, config, {"total_s": time.perf_counter() - started})
    return EXIT_OK


def cmd_codec_check(args) -> int:
    model = _load_checkpoint(args.model)
    cfg = load_config(args.config) if args.config else None
    correlation = _correlation_from(args, cfg)
    n = args.samples
    started = time.perf_counter()
    stages = ("stage1",) if model.kind == "conditional" else None
    op = operational_rate(model, correlation, n, split_streams(args.seed)["eval"], stages=stages)
    result = {
        "scheme": model.kind,
        "n": n,
        "measured_bits": op.measured_bits,
        "cross_entropy_bits": op.cross_entropy_bits,
        "measured_total": op.measured_total,
        "cross_entropy_total": op.cross_entropy_total,
        "lossless": op.lossless,
    }
    tolerance = 0.01 * op.cross_entropy_total + 64.0 / n
    result["within_tolerance"] = bool(abs(op.measured_total - op.cross_entropy_total) <= tolerance)
    if model.kind == "conditional":
        result["sw_ideal_stage2_bits"] = sw_ideal_rate(model, correlation, n, split_streams(args.seed)["eval"])
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "codec.json"), result)
        write_manifest(args.out, "codec-check", args.argv, {"model": args.model, "samples": n, "seed": args.seed},
                       {"total_s": time.perf_counter() - started})
    return EXIT_OK if op.lossless and result["within_tolerance"] else EXIT_FAILURE


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse already exits 2; keep the message on stderr
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hbcompress", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bounds", help="asymptotic minimum weighted distortion curve")
    b.add_argument("--sigma-x2", type=float, default=1.0)
    b.add_argument("--sigma-n2", type=float, required=True)
    b.add_argument("--beta", type=float, required=True)
    b.add_argument("--rates", default="0:3:0.05", help="lo:hi:step in bits")
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_bounds)

    t = sub.add_parser("train", help="train one model per configured seed")
    t.add_argument("--config", required=True)
    t.add_argument("--scheme", choices=SCHEME_KINDS)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train and evaluate over a lambda grid and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--scheme", choices=SCHEME_KINDS)
    s.add_argument("--lambdas", help="comma-separated")
    s.add_argument("--seeds", help="comma-separated")
    s.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("viz", cmd_viz, "quantization maps, codebook and decoder curves"),
        ("codec-check", cmd_codec_check, "entropy-code hard indices and compare rates"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--model", required=True, help="checkpoint JSON")
        e.add_argument("--config")
        e.add_argument("--sigma-x2", type=float)
        e.add_argument("--sigma-n2", type=float)
        e.add_argument("--samples", type=int, default=100_000)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", required=name == "viz")
        if name == "viz":
            e.add_argument("--grid", help="lo:hi:step over x")
        e.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "samples", 1) is not None and getattr(args, "samples", 1) < 1:
        print("hbcompress: error: --samples must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hbcompress: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"hbcompress: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
