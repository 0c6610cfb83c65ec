"""Sweep orchestration, result tables and the ``sdbridge`` command line.

Raw results are one CSV row per ``(cell, method, seed)`` with the columns in
:data:`RESULT_COLUMNS`; ``report`` aggregates them into mean and sample
standard deviation over seeds.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthgen
from .denoiser import load_checkpoint, save_checkpoint
from .engine import (BridgePair, RunConfig, classifier_for, evaluate, init_pair, make_data,
                     train)
from .exceptions import CalibrationError, ConfigError, ContractError, DivergenceError

__all__ = [
    "RESULT_COLUMNS", "METHODS", "SWEEP_KINDS", "DEFAULT_GRIDS", "DESK_PROFILE", "SweepSpec",
    "ResultRow", "method_config", "cell_config", "sweep_methods", "run_one", "run_ablation",
    "run_wta_cost", "measure_iteration_time", "run_sweep", "write_results", "read_results",
    "aggregate", "format_report", "load_config_file", "main",
]

log = logging.getLogger("sdbridge")

RESULT_COLUMNS = ("sweep", "cell", "method", "seed", "swd", "mmd2", "content_acc", "cycle_mse",
                  "iter_time_s")
METRIC_COLUMNS = ("swd", "mmd2", "content_acc", "cycle_mse")
NA = "NA"

METHODS = {
    "mm-only": dict(lambda_end=0.0, lambda_traj=0.0, lambda_pair=0.0),
    "mm+end": dict(lambda_traj=0.0, lambda_pair=0.0),
    "mm+traj": dict(lambda_pair=0.0),
    "paired-only": dict(lambda_end=0.0, lambda_traj=0.0, use_unpaired=False),
    "semi-paired": dict(),
}

SWEEP_KINDS = ("rho", "ablation", "modes", "capacity", "candidates")

DEFAULT_GRIDS = {
    "rho": (0.0, 0.1, 0.5, 1.0),
    "ablation": (0.0, 0.5, 1.0),
    "modes": (6, 20, 100, 1000),
    "capacity": (1, 2, 4, 8, 16, None),
    "candidates": (1, 2, 4, 8, 16),
}

# Reduced model and preconditioned score matching so that one run fits in a
# few minutes on a single core.
DESK_PROFILE = dict(
    n_layers=2, d_model=32, n_heads=4, time_dim=32, epochs=15, learning_rate=1e-3,
    output_scaling="sigma", dsm_weighting="sigma2", cycle_batch=64,
)

# capacity and candidate sweeps run the full objective at this paired fraction
SWEEP_RHO = 0.5
TIMING_WARMUP = 10
TIMING_ITERS = 50


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    values: tuple = ()
    seeds: int = 3
    base: RunConfig = field(default_factory=RunConfig)
    include_large: bool = False
    timing: bool | None = None

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}, got {self.kind!r}")
        if self.seeds < 1:
            raise ConfigError("seeds must be positive")
        if not self.values:
            grid = DEFAULT_GRIDS[self.kind]
            if self.kind == "modes" and not self.include_large:
                grid = tuple(v for v in grid if v < 1000)
            object.__setattr__(self, "values", grid)

    @property
    def record_timing(self):
        return self.kind == "candidates" if self.timing is None else self.timing


@dataclass(frozen=True)
class ResultRow:
    sweep: str
    cell: str
    method: str
    seed: int
    swd: float | None = None
    mmd2: float | None = None
    content_acc: float | None = None
    cycle_mse: float | None = None
    iter_time_s: float | None = None

    @property
    def applicable(self):
        return self.content_acc is not None

    def as_csv(self):
        def fmt(v):
            if v is None:
                return NA
            return f"{v:.17g}" if isinstance(v, float) else str(v)
        return [fmt(getattr(self, c)) for c in RESULT_COLUMNS]

    @classmethod
    def from_csv(cls, rec):
        def num(v, cast=float):
            return None if v in (NA, "") else cast(v)
        return cls(rec["sweep"], rec["cell"], rec["method"], int(rec["seed"]),
                   *(num(rec[c]) for c in METRIC_COLUMNS), num(rec["iter_time_s"]))


def cell_label(value):
    if value is None:
        return "inf"
    if isinstance(value, float) and value.is_integer() is False:
        return repr(value)
    return str(value)


def spread_for_modes(n_content, base):
    """Within-class spread scaled to the chord between neighbouring class means.

    Keeps the ratio of class spacing to spread at its ``K_c=6`` value so the
    content classes stay separable as ``K_c`` grows on a fixed circle.
    """
    ratio = min(1.0, math.sin(math.pi / max(n_content, 2)) / math.sin(math.pi / 6))
    return dict(style_norm=base.style_norm * ratio, noise_std=base.noise_std * ratio)


def method_config(base, method):
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    return base.with_(**METHODS[method])


def sweep_methods(kind):
    if kind in ("rho", "ablation"):
        return tuple(METHODS)
    if kind == "modes":
        return ("mm-only", "semi-paired")
    return ("semi-paired",)


def cell_config(kind, value, base):
    """Base config with one grid value applied."""
    if kind in ("rho", "ablation"):
        return base.with_(rho=float(value))
    if kind == "modes":
        k = int(value)
        return base.with_(rho=0.0, n_content=k, **spread_for_modes(k, base))
    if kind == "capacity":
        return base.with_(rho=SWEEP_RHO, capacity=None if value is None else int(value))
    if kind == "candidates":
        return base.with_(rho=SWEEP_RHO, wta_candidates=int(value))
    raise ConfigError(f"unknown sweep kind {kind!r}")


def seeded(config, seed):
    return config.with_(data_seed=seed, init_seed=seed, train_seed=seed, eval_seed=seed)


class _StopTiming(Exception):
    pass


def run_one(kind, value, method, seed, base, record_timing=False, cache_dir=None):
    """Train and evaluate one ``(cell, method, seed)``; returns a :class:`ResultRow`."""
    cell = cell_label(value)
    cfg = seeded(method_config(cell_config(kind, value, base), method), seed)
    if method == "paired-only" and cfg.rho == 0.0:
        return ResultRow(kind, cell, method, seed)
    cached = _cache_get(cache_dir, cfg, record_timing)
    if cached is not None:
        return ResultRow(kind, cell, method, seed, *cached)
    spec, train_set, test_set = make_data(cfg)
    clf = classifier_for(cfg, spec, train_set)
    pair, tlog = train(cfg, train_set)
    report = evaluate(pair, test_set, clf, cfg.eval_seed)
    timing = None
    if record_timing:
        timing = measure_iteration_time(cfg, train_set)
    values = (report.swd, report.mmd2, report.content_acc, report.cycle_mse, timing)
    _cache_put(cache_dir, cfg, record_timing, values)
    return ResultRow(kind, cell, method, seed, *values)


def measure_iteration_time(config, train_set, warmup=TIMING_WARMUP, iters=TIMING_ITERS):
    """Median seconds per training iteration over ``iters`` after ``warmup``.

    Uses a fresh model and the monotonic clock; iteration boundaries are the
    training callback, so each duration covers one full optimisation step.
    """
    per_epoch = math.ceil(len(train_set) / config.batch_size)
    epochs = math.ceil((warmup + iters) / per_epoch)
    stamps = [time.perf_counter()]

    def tick(it, row):
        stamps.append(time.perf_counter())
        if it + 1 >= warmup + iters:
            raise _StopTiming

    try:
        train(config.with_(epochs=epochs), train_set, pair=init_pair(config), callback=tick)
    except _StopTiming:
        pass
    return float(np.median(np.diff(stamps)[warmup:warmup + iters]))


def _cache_key(cfg, record_timing):
    return f"{cfg.fingerprint()}{'-t' if record_timing else ''}.json"


def _cache_get(cache_dir, cfg, record_timing):
    if cache_dir is None:
        return None
    path = Path(cache_dir) / _cache_key(cfg, record_timing)
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    return tuple(data["values"])


def _cache_put(cache_dir, cfg, record_timing, values):
    if cache_dir is None:
        return
    path = Path(cache_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / _cache_key(cfg, record_timing)).write_text(
        json.dumps({"config": cfg.to_flat(), "values": list(values)}, sort_keys=True))


def _job(args):
    return run_one(*args)


def run_sweep(spec, workers=1, cache_dir=None, progress=None):
    """Run every ``(cell, method, seed)`` of a sweep; rows in grid order."""
    jobs = [(spec.kind, v, m, s, spec.base, spec.record_timing, cache_dir)
            for v in spec.values for m in sweep_methods(spec.kind) for s in range(spec.seeds)]
    if workers <= 1 or spec.record_timing:
        rows = []
        for job in jobs:
            rows.append(run_one(*job))
            if progress:
                progress(rows[-1])
        return rows
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def run_ablation(value, base, seeds=3, kind="ablation", cache_dir=None):
    """All five methods at one paired fraction; paired-only at rho=0 is a NA row."""
    return [run_one(kind, value, m, s, base, False, cache_dir) for m in METHODS for s in range(seeds)]


def run_wta_cost(values=DEFAULT_GRIDS["candidates"], base=None, seeds=3, cache_dir=None):
    """Accuracy and per-iteration wall time for each WTA candidate count."""
    base = base or RunConfig()
    return [run_one("candidates", v, "semi-paired", s, base, True, cache_dir)
            for v in values for s in range(seeds)]


def write_results(rows, path, append=True):
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())


def read_results(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ContractError(f"unexpected results header {reader.fieldnames}")
        return [ResultRow.from_csv(rec) for rec in reader]


def aggregate(rows):
    """``{(sweep, cell, method): {metric: (mean, sample_std, n)}}`` over seeds."""
    groups = {}
    for row in rows:
        groups.setdefault((row.sweep, row.cell, row.method), []).append(row)
    out = {}
    for key, members in groups.items():
        stats = {}
        for metric in METRIC_COLUMNS + ("iter_time_s",):
            vals = [getattr(r, metric) for r in members if getattr(r, metric) is not None]
            if not vals:
                stats[metric] = None
                continue
            mean = math.fsum(vals) / len(vals)
            std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
            stats[metric] = (mean, std, len(vals))
        out[key] = stats
    return out


REPORT_HEADER = ("SWD", "MMD²", "Content Acc.", "Cycle MSE")


def format_report(rows, table3=False):
    """Text table (one line per cell and method) of mean ± std over seeds."""
    agg = aggregate(rows)
    lines = []
    head = f"{'sweep':<11}{'cell':>6}  {'method':<12}" + "".join(f"{h:>22}" for h in REPORT_HEADER)
    lines.append(head)
    for (sweep, cell, method), stats in agg.items():
        if table3 and sweep in ("rho", "ablation") and cell not in ("0.0", "0.5", "1.0"):
            continue
        cols = []
        for metric in METRIC_COLUMNS:
            s = stats[metric]
            cols.append(f"{'N/A':>22}" if s is None else f"{s[0]:>12.4g} ± {s[1]:<7.2g}")
        lines.append(f"{sweep:<11}{cell:>6}  {method:<12}" + "".join(cols))
    return "\n".join(lines)


def write_report_csv(rows, path):
    agg = aggregate(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sweep", "cell", "method", "n_seeds"]
                        + [f"{m}_{s}" for m in METRIC_COLUMNS + ("iter_time_s",) for s in ("mean", "std")])
        for (sweep, cell, method), stats in agg.items():
            n = max((s[2] for s in stats.values() if s is not None), default=0)
            vals = []
            for m in METRIC_COLUMNS + ("iter_time_s",):
                vals += [NA, NA] if stats[m] is None else [f"{stats[m][0]:.17g}", f"{stats[m][1]:.17g}"]
            writer.writerow([sweep, cell, method, n] + vals)


# ---------------------------------------------------------------------------
# command line


def load_config_file(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _config_from_args(args):
    values = {}
    if getattr(args, "profile", None) == "desk":
        values.update(DESK_PROFILE)
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for flag in ("rho", "epochs", "n_content"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = v
    seed = getattr(args, "seed", None)
    if seed is not None:
        values.update(data_seed=seed, init_seed=seed, train_seed=seed, eval_seed=seed)
    return RunConfig.from_flat(values)


def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--profile", choices=("default", "desk"), default="default")
    p.add_argument("--seed", type=int)


def _cmd_gen_data(args):
    cfg = _config_from_args(args)
    spec = cfg.generator()
    rng = np.random.default_rng([cfg.data_seed, 1])
    data = synthgen.assign_pairing(synthgen.sample(spec, args.n, rng), cfg.rho, rng)
    synthgen.write_csv(data, args.out)
    print(f"wrote {len(data)} samples ({data.n_paired} paired) to {args.out}")
    return 0


def _cmd_train(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pair, tlog = train(cfg)
    tlog.write_csv(out / "train_log.csv")
    save_checkpoint(pair.fwd, out / "fwd.ckpt")
    save_checkpoint(pair.rev, out / "rev.ckpt")
    (out / "config.txt").write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items()))
    print(f"trained {len(tlog.rows)} iterations; checkpoints in {out}")
    return 0


def _cmd_eval(args):
    run_dir = Path(args.run)
    values = load_config_file(run_dir / "config.txt")
    cfg = RunConfig.from_flat(values)
    if args.seed is not None:
        cfg = cfg.with_(eval_seed=args.seed)
    pair = BridgePair(load_checkpoint(run_dir / "fwd.ckpt"), load_checkpoint(run_dir / "rev.ckpt"),
                      cfg.schedule, cfg.output_scaling)
    spec, train_set, test_set = make_data(cfg)
    report = evaluate(pair, test_set, classifier_for(cfg, spec, train_set), cfg.eval_seed)
    row = ResultRow("eval", cell_label(cfg.rho), args.method, cfg.eval_seed, report.swd, report.mmd2,
                    report.content_acc, report.cycle_mse)
    if args.out:
        write_results([row], args.out)
    print(",".join(RESULT_COLUMNS))
    print(",".join(row.as_csv()))
    return 0


def _parse_value(kind, text):
    if kind == "capacity" and text.lower() in ("inf", "none", "unlimited"):
        return None
    return float(text) if kind in ("rho", "ablation") else int(text)


def _cmd_sweep(args):
    base = _config_from_args(args)
    values = tuple(_parse_value(args.kind, v) for v in args.values.split(",")) if args.values else ()
    spec = SweepSpec(args.kind, values, args.seeds, base, args.include_large,
                     True if args.timing else (False if args.no_timing else None))
    rows = run_sweep(spec, args.workers, args.cache,
                     progress=lambda r: log.info("%s %s %s seed=%d acc=%s", r.sweep, r.cell, r.method,
                                                 r.seed, r.content_acc))
    write_results(rows, args.out)
    print(f"appended {len(rows)} rows to {args.out}")
    return 0


def _cmd_report(args):
    rows = read_results(args.input)
    print(format_report(rows, table3=args.table3))
    if args.out:
        write_report_csv(rows, args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sdbridge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a benchmark dataset CSV")
    _add_config_flags(p)
    p.add_argument("--rho", type=float)
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--rho", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--method", default="semi-paired")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="run a sweep and append raw rows")
    _add_config_flags(p)
    p.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    p.add_argument("--values", help="comma-separated grid (default: the standard grid)")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--include-large", action="store_true", help="include the K_c=1000 cell")
    p.add_argument("--cache", help="directory of per-configuration result files")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--timing", action="store_true")
    g.add_argument("--no-timing", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="aggregate raw rows into mean ± std tables")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--table3", action="store_true", help="restrict rho rows to 0, 0.5 and 1")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CalibrationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
