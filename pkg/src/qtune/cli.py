"""Command-line workflow over a workspace directory.

Every subcommand reads its inputs from ``--config`` and from artifacts an
earlier subcommand left under ``--out``, and writes its own outputs there:

    base.fvecs, queries.fvecs     gen-synthetic
    gt.ivecs, gt.dist.fvecs       gt
    split.json                    stats (train/holdout query indices)
    hierarchy/                    build
    stats/                        stats
    tune.json                     tune
    bench.csv                     bench
    grid/                         grid
    validate/                     validate

Files are written to a temporary name and renamed into place, so a failed
run leaves no partial output behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qtune.dataset_io import (Dataset, DatasetError, GroundTruth, Metric, QuerySet, SyntheticSpec,
                              compute_ground_truth, load_ground_truth, load_queries, load_vectors, make_synthetic,
                              save_ivecs, save_vectors)
from qtune.experiments import (ExperimentError, grid_parity, model_accuracy, out_of_sample, sample_size_study,
                               split_queries)
from qtune.quantization import (HierarchyConfig, QuantizationError, build_hierarchy, load_hierarchy, preset,
                                save_hierarchy)
from qtune.recall_stats import StatsError, compute_stats, load_stats, save_stats
from qtune.search import TuningError, bench, validate_tuning
from qtune.tuner import CostModel, InfeasibleTarget, TunerError, Tuner

log = logging.getLogger("qtune")

EXIT_UNEXPECTED = 1
EXIT_IO = 3
EXIT_INVALID = 4
EXIT_INFEASIBLE = 5

MIN_HOLDOUT = 100


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration

@dataclass
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 0


@dataclass
class Targets:
    budgets: list = field(default_factory=list)
    recalls: list = field(default_factory=list)
    frontier: bool = False


@dataclass
class GridSpec:
    axes: list                      # candidate values for t_1..t_{m-1}
    last: list                      # candidate values for t_m


@dataclass
class ValidateSpec:
    sample_sizes: list = field(default_factory=lambda: [100, 1000])
    replicas: int = 3
    frontier_points: int = 12
    recall_levels: list = field(default_factory=lambda: [0.8, 0.9, 0.97])


@dataclass
class ExperimentConfig:
    """Everything one experiment needs besides the workspace directory.

    Dataset paths default to the files ``gen-synthetic`` and ``gt`` write
    into the workspace. An inline ``hierarchy`` takes precedence over
    ``preset``.
    """

    base: str | None = None
    queries: str | None = None
    ground_truth: str | None = None
    metric: str = "squared_euclidean"
    preset: str = "ivf_pq"
    hierarchy: dict | None = None
    k: int = 10
    seed: int = 0
    threads: int = 1
    split: SplitSpec = field(default_factory=SplitSpec)
    targets: Targets = field(default_factory=Targets)
    grid: GridSpec | None = None
    validate: ValidateSpec = field(default_factory=ValidateSpec)

    @classmethod
    def from_json(cls, obj: dict, root: Path | None = None) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"split": SplitSpec, "targets": Targets, "grid": GridSpec, "validate": ValidateSpec}
        kwargs = {}
        for key, value in obj.items():
            if key in nested and value is not None:
                try:
                    value = nested[key](**value)
                except TypeError as exc:
                    raise ConfigError(f"bad {key!r} section: {exc}") from None
            if key in ("base", "queries", "ground_truth") and value is not None and root is not None:
                value = str((root / value) if not Path(value).is_absolute() else Path(value))
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.check()
        return cfg

    def check(self):
        Metric.parse(self.metric)
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if not 0 < self.split.train_fraction < 1:
            raise ConfigError("split.train_fraction must lie strictly between 0 and 1")
        if self.hierarchy is None:
            try:
                preset(self.preset, 1000, 8)
            except QuantizationError as exc:
                raise ConfigError(str(exc)) from None
        if any(not 0 < r <= 1 for r in self.targets.recalls):
            raise ConfigError("recall targets must lie in (0, 1]")
        if self.validate.replicas < 2:
            raise ConfigError("validate.replicas must be at least 2")

    def hierarchy_config(self, n: int, d: int) -> HierarchyConfig:
        if self.hierarchy is not None:
            return HierarchyConfig.from_json(self.hierarchy)
        return preset(self.preset, n, d, self.metric, self.seed)


def load_config(path: str | None, overrides: argparse.Namespace) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        try:
            obj = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        cfg = ExperimentConfig.from_json(obj, p.parent)
    if overrides.seed is not None:
        cfg.seed = overrides.seed
    if overrides.threads is not None:
        cfg.threads = overrides.threads
    cfg.check()
    return cfg


# --------------------------------------------------------------------------
# workspace and atomic writes

class Workspace:
    def __init__(self, root: str | os.PathLike, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.timings: dict[str, float] = {}

    @property
    def base_path(self) -> Path:
        return Path(self.cfg.base) if self.cfg.base else self.root / "base.fvecs"

    @property
    def queries_path(self) -> Path:
        return Path(self.cfg.queries) if self.cfg.queries else self.root / "queries.fvecs"

    @property
    def gt_prefix(self) -> Path:
        return Path(self.cfg.ground_truth) if self.cfg.ground_truth else self.root / "gt"

    hierarchy_dir = property(lambda self: self.root / "hierarchy")
    stats_dir = property(lambda self: self.root / "stats")
    tune_path = property(lambda self: self.root / "tune.json")

    @contextlib.contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        yield
        elapsed = time.perf_counter() - start
        self.timings[name] = self.timings.get(name, 0.0) + elapsed
        log.info("%s: %.2f s", name, elapsed)

    # loaders; each checks existence first so errors surface before any writes
    def dataset(self):
        return load_vectors(_existing(self.base_path))

    def queries(self) -> QuerySet:
        return load_queries(_existing(self.queries_path))

    def ground_truth(self) -> GroundTruth:
        _existing(self.gt_prefix.with_name(self.gt_prefix.name + ".ivecs"))
        return load_ground_truth(self.gt_prefix, self.cfg.metric)

    def hierarchy(self):
        _existing(self.hierarchy_dir / "manifest.json")
        return load_hierarchy(self.hierarchy_dir)

    def split(self, n_q: int) -> tuple[np.ndarray, np.ndarray]:
        return split_queries(n_q, self.cfg.split.train_fraction, self.cfg.split.seed)


def _existing(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return path


@contextlib.contextmanager
def atomic_path(target: Path):
    """Yield a temporary sibling of ``target``; rename it into place on success."""
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.name}.tmp-{os.getpid()}")
    _remove(tmp)
    try:
        yield tmp
    except BaseException:
        _remove(tmp)
        raise
    if target.is_dir() and tmp.is_dir():
        old = target.with_name(f".{target.name}.old-{os.getpid()}")
        os.replace(target, old)
        os.replace(tmp, target)
        _remove(old)
    else:
        os.replace(tmp, target)


def _remove(path: Path):
    if path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()


def write_json(path: Path, obj):
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2) + "\n")


def write_csv(path: Path, header: list, rows):
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_synthetic(ws: Workspace, args) -> None:
    spec = SyntheticSpec(n=args.n, d=args.d, n_queries=args.queries, clusters=args.clusters, seed=ws.cfg.seed)
    with ws.phase("generate"):
        ds, qs = make_synthetic(spec)
    with atomic_path(ws.root / "base.fvecs") as tmp:
        save_vectors(tmp, ds, "fvecs")
    with atomic_path(ws.root / "queries.fvecs") as tmp:
        save_vectors(tmp, Dataset(qs.queries), "fvecs")
    log.info("wrote %d base vectors and %d queries of dimension %d", ds.n, qs.n_q, ds.d)


def cmd_gt(ws: Workspace, args) -> None:
    ds, qs = ws.dataset(), ws.queries()
    k = args.k or ws.cfg.k
    with ws.phase("ground truth"):
        gt = compute_ground_truth(ds, qs, k, ws.cfg.metric, threads=ws.cfg.threads)
    with atomic_path(ws.root / "gt.ivecs") as ipath, atomic_path(ws.root / "gt.dist.fvecs") as dpath:
        save_ivecs(ipath, gt.indices)
        save_vectors(dpath, Dataset(gt.distances), "fvecs")


def cmd_build(ws: Workspace, args) -> None:
    ds = ws.dataset()
    config = ws.cfg.hierarchy_config(ds.n, ds.d)
    with ws.phase("build"):
        h = build_hierarchy(ds, config, seed=ws.cfg.seed)
    with atomic_path(ws.hierarchy_dir) as tmp:
        save_hierarchy(h, tmp)
    log.info("hierarchy with %d levels, footprints %s", h.m, h.footprints)


def cmd_stats(ws: Workspace, args) -> None:
    h, qs, gt = ws.hierarchy(), ws.queries(), ws.ground_truth()
    train, holdout = ws.split(qs.n_q)
    with ws.phase("stats"):
        lm, _ = compute_stats(qs.subset(train), gt.subset(train), h, k=ws.cfg.k, threads=ws.cfg.threads)
    with atomic_path(ws.stats_dir) as tmp:
        save_stats(tmp, lm, h)
    write_json(ws.root / "split.json", {"train": train.tolist(), "holdout": holdout.tolist()})


def _tuner(directory: Path, t_min: int | None = None) -> Tuner:
    _existing(directory / "manifest.json")
    st = load_stats(directory)
    cm = CostModel(st.footprints, st.loss.n, st.dataset_nbytes)
    return Tuner(st.loss, cm, t_min)


def _solution_json(s) -> dict:
    return {"lambda": s.lam, "t": [int(x) for x in s.t], "modeled_cost": s.cost, "modeled_recall": s.proxy_recall}


def cmd_tune(ws: Workspace, args) -> None:
    budgets = args.budget or ([] if (args.recall or args.frontier) else ws.cfg.targets.budgets)
    recalls = args.recall or ([] if (args.budget or args.frontier) else ws.cfg.targets.recalls)
    frontier = args.frontier or (not budgets and not recalls)
    with ws.phase("tuner setup"):
        tuner = _tuner(Path(args.stats) if args.stats else ws.stats_dir, args.k)
    with ws.phase("solve"):
        if frontier:
            out = [_solution_json(s) for s in tuner.frontier().points]
        else:
            sols = [tuner.for_cost(J) for J in budgets] + [tuner.for_recall(r) for r in recalls]
            out = [_solution_json(s) for s in sols]
            if len(out) == 1:
                out = out[0]
    write_json(ws.tune_path, out)
    log.info("wrote %s", ws.tune_path)


def _load_tunings(ws: Workspace, args) -> list:
    try:
        if args.tuning:
            return [[int(x) for x in spec.split(",")] for spec in args.tuning]
        path = Path(args.tunings) if args.tunings else ws.tune_path
        data = json.loads(_existing(path).read_text())
        if isinstance(data, dict):
            data = [data]
        return [entry["t"] if isinstance(entry, dict) else entry for entry in data]
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"unreadable tunings: {exc}") from None


def _query_rows(ws: Workspace, which: str, n_q: int) -> np.ndarray:
    train, holdout = ws.split(n_q)
    return {"train": train, "holdout": holdout, "all": np.arange(n_q)}[which]


def cmd_bench(ws: Workspace, args) -> None:
    tunings = _load_tunings(ws, args)
    h, qs, gt = ws.hierarchy(), ws.queries(), ws.ground_truth()
    for t in tunings:
        validate_tuning(t, h, ws.cfg.k)
    rows = _query_rows(ws, args.on, qs.n_q)
    cm = CostModel.from_hierarchy(h)
    with ws.phase("bench"):
        res = bench(h, tunings, qs.subset(rows), gt.subset(rows), ws.cfg.k, threads=ws.cfg.threads,
                    timing=not args.no_timing, timing_queries=args.timing_queries)
    header = ["tuning_id"] + [f"t_{i + 1}" for i in range(h.m)] + \
             ["modeled_cost", "bytes_per_query", "recall_at_k", "qps"]
    write_csv(ws.root / "bench.csv", header,
              [[i, *r.tuning, _fmt(cm.cost(r.tuning)), _fmt(r.bytes_per_query), _fmt(r.recall), _fmt(r.qps)]
               for i, r in enumerate(res)])


def cmd_grid(ws: Workspace, args) -> None:
    spec = ws.cfg.grid
    if spec is None:
        raise ConfigError("the grid subcommand needs a 'grid' section with 'axes' and 'last'")
    h, qs, gt = ws.hierarchy(), ws.queries(), ws.ground_truth()
    if len(spec.axes) != h.m - 1:
        raise ConfigError(f"grid needs {h.m - 1} axes for a {h.m}-level hierarchy, got {len(spec.axes)}")
    train, holdout = ws.split(qs.n_q)
    with ws.phase("grid"):
        rep = grid_parity(h, spec.axes, spec.last, qs.subset(train), gt.subset(train), qs.subset(holdout),
                          gt.subset(holdout), ws.cfg.k, ws.cfg.threads)
    ws.timings["tuner (stats + solve)"] = rep.tuner_seconds
    ws.timings["grid evaluation"] = rep.grid_seconds
    out = ws.root / "grid"
    tcols = [f"t_{i + 1}" for i in range(h.m)]
    pareto = set(rep.pareto)
    write_csv(out / "cells.csv", ["tuning_id", *tcols, "modeled_cost", "bytes_per_query", "recall_at_k", "pareto"],
              [[i, *e.tuning, _fmt(e.modeled_cost), _fmt(e.bytes_per_query), _fmt(e.recall), int(i in pareto)]
               for i, e in enumerate(rep.cells)])
    write_csv(out / "parity.csv",
              ["grid_tuning_id", "budget", "grid_recall", *[f"tuner_{c}" for c in tcols], "tuner_cost",
               "tuner_recall", "shortfall"],
              [[i, _fmt(p.budget), _fmt(p.grid_recall), *p.tuner_tuning, _fmt(p.tuner_cost), _fmt(p.tuner_recall),
                _fmt(p.shortfall)] for i, p in zip(rep.pareto, rep.parity)])
    write_json(out / "report.json", {"cells": len(rep.cells), "pareto_points": len(rep.pareto),
                                     "worst_shortfall": rep.worst_shortfall, "runtime_seconds": ws.timings})
    log.info("%d cells, %d on the grid frontier, worst tuner shortfall %.4f",
             len(rep.cells), len(rep.pareto), rep.worst_shortfall)


def cmd_validate(ws: Workspace, args) -> None:
    h, qs, gt = ws.hierarchy(), ws.queries(), ws.ground_truth()
    vs, k, threads = ws.cfg.validate, ws.cfg.k, ws.cfg.threads
    train, holdout = ws.split(qs.n_q)
    if holdout.size < MIN_HOLDOUT:
        raise ConfigError(f"holdout has {holdout.size} queries; at least {MIN_HOLDOUT} are needed")
    st = load_stats(_existing(ws.stats_dir))
    if st.hierarchy_digest != h.digest():
        raise ConfigError("stats were computed for a different hierarchy; rerun 'stats'")
    tuner = Tuner(st.loss, CostModel(st.footprints, st.loss.n, st.dataset_nbytes))
    qh, gh = qs.subset(holdout), gt.subset(holdout)
    out = ws.root / "validate"
    tcols = [f"t_{i + 1}" for i in range(h.m)]

    with ws.phase("model accuracy"):
        acc = model_accuracy(h, tuner, qh, gh, k, count=vs.frontier_points, threads=threads,
                             timing_queries=args.timing_queries)
    write_csv(out / "accuracy.csv",
              ["tuning_id", *tcols, "proxy_recall", "recall_at_k", "geometric_recall", "modeled_cost",
               "bytes_per_query", "seconds_per_query"],
              [[i, *p.tuning, _fmt(p.proxy_recall), _fmt(p.recall), _fmt(p.geometric_recall), _fmt(p.modeled_cost),
                _fmt(p.bytes_per_query), _fmt(p.seconds_per_query)] for i, p in enumerate(acc.points)])

    budgets = ws.cfg.targets.budgets or [tuner.for_recall(r).cost for r in vs.recall_levels]
    with ws.phase("out of sample"):
        oos = out_of_sample(h, qs, gt, k, budgets, seed=ws.cfg.split.seed, threads=threads)
    write_csv(out / "out_of_sample.csv",
              ["budget", "eval_half", "in_sample_recall", "out_sample_recall", "delta",
               *[f"in_{c}" for c in tcols], *[f"out_{c}" for c in tcols]],
              [[_fmt(r.budget), r.eval_half, _fmt(r.in_sample_recall), _fmt(r.out_sample_recall), _fmt(r.delta),
                *r.in_sample_tuning, *r.out_sample_tuning] for r in oos])

    with ws.phase("sample size"):
        pool_q, pool_g = qs.subset(train), gt.subset(train)
        sizes = [s for s in vs.sample_sizes if s * vs.replicas <= train.size]
        skipped = sorted(set(vs.sample_sizes) - set(sizes))
        if skipped:
            log.warning("sample sizes %s do not fit %d times in %d train queries; skipped",
                        skipped, vs.replicas, train.size)
        ss = sample_size_study(h, pool_q, pool_g, qh, gh, k, sizes, vs.replicas, budgets,
                               seed=ws.cfg.seed, threads=threads) if sizes else []
        ss += sample_size_study(h, pool_q, pool_g, qh, gh, k, [train.size], 1, budgets,
                                seed=ws.cfg.seed, threads=threads)
    write_csv(out / "sample_size.csv", ["size", "budget", "replicas", "mean_recall", "std_recall", "recalls"],
              [[r.size, _fmt(r.budget), len(r.recalls), _fmt(r.mean), _fmt(r.std),
                " ".join(repr(float(x)) for x in r.recalls)] for r in ss])

    summary = {
        "r2_recall_vs_proxy": acc.r2_recall,
        "r2_geometric_recall_vs_proxy": acc.r2_geometric,
        "bytes_match_model_exactly": acc.bytes_exact,
        "r2_seconds_vs_modeled_cost": acc.r2_time,
        "max_out_of_sample_delta": max(r.delta for r in oos),
        "budgets": budgets,
        "runtime_seconds": ws.timings,
    }
    write_json(out / "summary.json", summary)
    log.info("r2 %.4f (geometric %.4f), max out-of-sample delta %.4f",
             acc.r2_recall, acc.r2_geometric, summary["max_out_of_sample_delta"])


# --------------------------------------------------------------------------
# entry point

COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic, "gt": cmd_gt, "build": cmd_build, "stats": cmd_stats,
    "tune": cmd_tune, "bench": cmd_bench, "grid": cmd_grid, "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="seed for data generation and training (overrides config)")
    common.add_argument("--threads", type=int, help="worker threads (overrides config)")
    common.add_argument("--out", default=".", help="workspace directory for all artifacts (default: .)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qtune", description="Tune multi-level quantized nearest-neighbor search.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", parents=[common], help="write a seeded Gaussian-mixture dataset")
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--d", type=int, default=32)
    g.add_argument("--queries", type=int, default=1_000)
    g.add_argument("--clusters", type=int, default=64)

    g = sub.add_parser("gt", parents=[common], help="exact k nearest neighbors of every query")
    g.add_argument("--k", type=int, help="ground-truth depth (default: config k)")

    sub.add_parser("build", parents=[common], help="train a quantization hierarchy")
    sub.add_parser("stats", parents=[common], help="per-level recall-loss curves on the train split")

    g = sub.add_parser("tune", parents=[common], help="solve for tunings under budgets or recall targets")
    g.add_argument("--budget", "--cost-budget", type=float, action="append",
                   help="modeled cost budget (repeatable)")
    g.add_argument("--recall", "--recall-target", type=float, action="append",
                   help="modeled recall target (repeatable)")
    g.add_argument("--frontier", action="store_true", help="emit the whole modeled frontier")
    g.add_argument("--stats", help="stats directory (default: stats/ in the workspace)")
    g.add_argument("--k", type=int, help="smallest allowed candidate count (default: the stats k)")

    g = sub.add_parser("bench", parents=[common], help="measure recall, bytes and speed of tunings")
    g.add_argument("--tuning", action="append", help="comma-separated tuning, e.g. 2000,200,10 (repeatable)")
    g.add_argument("--tunings", help="JSON file of tunings (default: tune.json in the workspace)")
    g.add_argument("--on", choices=["holdout", "train", "all"], default="holdout", help="query split to use")
    g.add_argument("--no-timing", action="store_true", help="skip wall-clock measurement")
    g.add_argument("--timing-queries", type=int, default=None, help="queries per timing pass")

    sub.add_parser("grid", parents=[common], help="grid search versus the tuner at matched cost")

    g = sub.add_parser("validate", parents=[common], help="model accuracy, generalization and sample size")
    g.add_argument("--timing-queries", type=int, default=200)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args)
        ws = Workspace(args.out, cfg)
        start = time.perf_counter()
        COMMANDS[args.command](ws, args)
        log.info("%s finished in %.2f s", args.command, time.perf_counter() - start)
        return 0
    except InfeasibleTarget as exc:
        log.error("infeasible target: %s", exc)
        return EXIT_INFEASIBLE
    except (ConfigError, DatasetError, QuantizationError, StatsError, TuningError, TunerError,
            ExperimentError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except Exception:
        log.exception("unexpected failure")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
