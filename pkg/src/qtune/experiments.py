"""Desk-scale experiments: grid parity, model accuracy, generalization, sample size, ablation.

Each function takes already-built artifacts (hierarchy, queries, ground
truth) and returns plain dataclasses that the CLI writes as CSV/JSON.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from qtune.dataset_io import Dataset, GroundTruth, QuerySet
from qtune.quantization import QuantizationHierarchy, build_hierarchy, preset
from qtune.recall_stats import compute_stats, loss_matrix, proxy_recall
from qtune.search import bench
from qtune.tuner import CostModel, Tuner, TunerError

MAX_GRID_CELLS = 100_000


class ExperimentError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers

def split_queries(n_q: int, train_fraction: float = 0.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint random train/test index sets (each sorted)."""
    if not 0 < train_fraction < 1:
        raise ExperimentError("train fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(n_q)
    cut = int(round(n_q * train_fraction))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def r_squared(x, y) -> float:
    """Squared sample Pearson correlation."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1] ** 2)


def monotone_grid(axes, last, max_cells: int = MAX_GRID_CELLS) -> list[tuple]:
    """All non-increasing tuples from per-level value lists.

    ``axes`` holds the candidate values of t_1..t_{m-1}; ``last`` those of
    t_m. The full product is refused above ``max_cells``.
    """
    axes = [sorted({int(v) for v in ax}, reverse=True) for ax in axes]
    last = sorted({int(v) for v in np.atleast_1d(last)}, reverse=True)
    total = int(np.prod([len(a) for a in axes] + [len(last)], dtype=np.float64))
    if total > max_cells:
        raise ExperimentError(f"grid has {total} cells, more than the limit of {max_cells}")
    cells = []
    for combo in itertools.product(*axes, last):
        if all(a >= b for a, b in zip(combo, combo[1:])):
            cells.append(tuple(combo))
    return sorted(cells)


def pareto_indices(costs, recalls) -> list[int]:
    """Indices of points not dominated in (lower cost, higher recall), by ascending cost."""
    order = sorted(range(len(costs)), key=lambda i: (costs[i], -recalls[i]))
    keep, best = [], -np.inf
    for i in order:
        if recalls[i] > best:
            keep.append(i)
            best = recalls[i]
    return keep


@dataclass
class Evaluated:
    tuning: list
    modeled_cost: float
    bytes_per_query: float
    recall: float
    geometric_recall: float
    proxy_recall: float | None = None
    seconds_per_query: float | None = None


def evaluate(h: QuantizationHierarchy, tunings, qs: QuerySet, gt: GroundTruth, k: int, cm: CostModel,
             curves=None, threads: int = 1, timing: bool = False, timing_queries: int | None = None) -> list[Evaluated]:
    rows = bench(h, tunings, qs, gt, k, threads=threads, timing=timing, timing_queries=timing_queries)
    out = []
    for r in rows:
        proxy = proxy_recall(r.tuning, curves) if curves is not None else None
        out.append(Evaluated(r.tuning, cm.cost(r.tuning), float(r.bytes_per_query), r.recall, r.geometric_recall,
                             proxy, r.seconds_per_query))
    return out


def tuner_for(h: QuantizationHierarchy, qs: QuerySet, gt: GroundTruth, k: int, threads: int = 1) -> Tuner:
    lm, _ = compute_stats(qs, gt, h, k=k, threads=threads)
    return Tuner(lm, CostModel.from_hierarchy(h))


def _at_budget(tuner: Tuner, J: float) -> list:
    return tuner.for_cost(J).t


# --------------------------------------------------------------------------
# grid parity

@dataclass
class ParityRow:
    budget: float
    grid_tuning: list
    grid_recall: float
    tuner_tuning: list
    tuner_cost: float
    tuner_recall: float

    @property
    def shortfall(self) -> float:
        return self.grid_recall - self.tuner_recall


@dataclass
class GridReport:
    cells: list                     # Evaluated per grid cell
    pareto: list                    # indices into cells
    parity: list                    # ParityRow per grid Pareto point
    tuner_seconds: float
    grid_seconds: float

    @property
    def worst_shortfall(self) -> float:
        return max(p.shortfall for p in self.parity)


def grid_parity(h: QuantizationHierarchy, axes, last, qs_stats: QuerySet, gt_stats: GroundTruth,
                qs_eval: QuerySet, gt_eval: GroundTruth, k: int, threads: int = 1) -> GridReport:
    """Evaluate a monotone grid and the tuner at every grid Pareto point's modeled cost."""
    cells = monotone_grid(axes, last)
    start = time.perf_counter()
    tuner = tuner_for(h, qs_stats, gt_stats, k, threads)
    tuner_seconds = time.perf_counter() - start
    cm = tuner.cm
    start = time.perf_counter()
    evaluated = evaluate(h, cells, qs_eval, gt_eval, k, cm, tuner.curves, threads)
    grid_seconds = time.perf_counter() - start
    front = pareto_indices([e.modeled_cost for e in evaluated], [e.recall for e in evaluated])
    start = time.perf_counter()
    tuned = [_at_budget(tuner, evaluated[i].modeled_cost) for i in front]
    tuner_seconds += time.perf_counter() - start
    tuned_eval = evaluate(h, tuned, qs_eval, gt_eval, k, cm, tuner.curves, threads)
    parity = [ParityRow(evaluated[i].modeled_cost, evaluated[i].tuning, evaluated[i].recall,
                        te.tuning, te.modeled_cost, te.recall) for i, te in zip(front, tuned_eval)]
    return GridReport(evaluated, front, parity, tuner_seconds, grid_seconds)


# --------------------------------------------------------------------------
# model accuracy

@dataclass
class AccuracyReport:
    points: list                    # Evaluated, with proxy and timing
    r2_recall: float                # empirical recall@k vs proxy
    r2_geometric: float             # geometric-mean recall vs proxy
    bytes_exact: bool               # instrumented bytes == J(t) * |X| for every point
    r2_time: float                  # wall time vs modeled cost (informational)


def spread_frontier(tuner: Tuner, count: int, min_proxy: float = 0.0) -> list:
    """About ``count`` frontier tunings spread evenly in proxy recall."""
    pts = [p for p in tuner.frontier() if p.proxy_recall >= min_proxy]
    if len(pts) <= count:
        return [p.t for p in pts]
    targets = np.linspace(pts[0].proxy_recall, pts[-1].proxy_recall, count)
    rec = np.array([p.proxy_recall for p in pts])
    picked = sorted({int(np.argmin(np.abs(rec - x))) for x in targets})
    return [pts[i].t for i in picked]


def model_accuracy(h: QuantizationHierarchy, tuner: Tuner, qs: QuerySet, gt: GroundTruth, k: int,
                   count: int = 12, min_proxy: float = 0.0, threads: int = 1,
                   timing_queries: int | None = 200) -> AccuracyReport:
    tunings = spread_frontier(tuner, count, min_proxy)
    pts = evaluate(h, tunings, qs, gt, k, tuner.cm, tuner.curves, threads, timing=True,
                   timing_queries=timing_queries)
    exact = all(tuner.cm.bytes_per_query(p.tuning) == _bench_bytes(h, p.tuning, qs, gt, k) for p in pts[:3])
    return AccuracyReport(pts, r_squared([p.proxy_recall for p in pts], [p.recall for p in pts]),
                          r_squared([p.proxy_recall for p in pts], [p.geometric_recall for p in pts]),
                          exact, r_squared([p.modeled_cost for p in pts], [p.seconds_per_query for p in pts]))


def _bench_bytes(h, t, qs, gt, k):
    return bench(h, [t], qs.subset(np.arange(min(qs.n_q, 20))), gt.subset(np.arange(min(qs.n_q, 20))), k)[0].bytes_per_query


# --------------------------------------------------------------------------
# generalization

@dataclass
class OutOfSampleRow:
    budget: float
    eval_half: int
    in_sample_tuning: list
    in_sample_recall: float
    out_sample_tuning: list
    out_sample_recall: float

    @property
    def delta(self) -> float:
        return abs(self.in_sample_recall - self.out_sample_recall)


def out_of_sample(h: QuantizationHierarchy, qs: QuerySet, gt: GroundTruth, k: int, budgets,
                  seed: int = 0, threads: int = 1) -> list[OutOfSampleRow]:
    """Tune on each half of a 50/50 split; compare on each half at matched budgets."""
    halves = split_queries(qs.n_q, 0.5, seed)
    sets = [(qs.subset(r), gt.subset(r)) for r in halves]
    tuners = [tuner_for(h, q, g, k, threads) for q, g in sets]
    rows = []
    for e, (q_eval, g_eval) in enumerate(sets):
        other = 1 - e
        tin = [_at_budget(tuners[e], J) for J in budgets]
        tout = [_at_budget(tuners[other], J) for J in budgets]
        ev = evaluate(h, tin + tout, q_eval, g_eval, k, tuners[e].cm, threads=threads)
        for b, J in enumerate(budgets):
            a, o = ev[b], ev[len(budgets) + b]
            rows.append(OutOfSampleRow(float(J), e, a.tuning, a.recall, o.tuning, o.recall))
    return rows


# --------------------------------------------------------------------------
# sample-size study

@dataclass
class SampleSizeRow:
    size: int
    budget: float
    recalls: list
    tunings: list = field(default_factory=list)

    @property
    def std(self) -> float:
        return float(np.std(self.recalls, ddof=1)) if len(self.recalls) > 1 else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.recalls))


def sample_size_study(h: QuantizationHierarchy, qs_pool: QuerySet, gt_pool: GroundTruth, qs_eval: QuerySet,
                      gt_eval: GroundTruth, k: int, sizes, replicas: int, budgets, seed: int = 0,
                      threads: int = 1) -> list[SampleSizeRow]:
    """Tune on disjoint query samples of each size and measure achieved recall on a fixed set.

    Rank counts are computed once for the whole pool; each sample's loss
    curves are aggregated from its own rows.
    """
    if any(s * replicas > qs_pool.n_q for s in sizes):
        raise ExperimentError(f"pool of {qs_pool.n_q} queries cannot hold {replicas} disjoint samples of {max(sizes)}")
    _, ws = compute_stats(qs_pool, gt_pool, h, k=k, threads=threads)
    cm = CostModel.from_hierarchy(h)
    rng = np.random.default_rng(seed)
    out = []
    plans = []
    for size in sizes:
        perm = rng.permutation(qs_pool.n_q)
        for rep in range(replicas):
            rows = np.sort(perm[rep * size:(rep + 1) * size])
            tuner = Tuner(loss_matrix(ws.V[rows], h.n, k), cm)
            plans.append((size, [_at_budget(tuner, J) for J in budgets]))
    flat = [t for _, ts in plans for t in ts]
    ev = evaluate(h, flat, qs_eval, gt_eval, k, cm, threads=threads)
    for size in sizes:
        for b, J in enumerate(budgets):
            recalls, tunings = [], []
            for p, (s, ts) in enumerate(plans):
                if s == size:
                    e = ev[p * len(budgets) + b]
                    recalls.append(e.recall)
                    tunings.append(e.tuning)
            out.append(SampleSizeRow(size, float(J), recalls, tunings))
    return out


# --------------------------------------------------------------------------
# ablation

@dataclass
class AblationRow:
    budget: float
    recalls: dict                   # preset name -> empirical recall
    tunings: dict


def ablation(ds: Dataset, presets: list[str], qs_train: QuerySet, gt_train: GroundTruth, qs_eval: QuerySet,
             gt_eval: GroundTruth, k: int, budgets=None, n_budgets: int = 12, seed: int = 0,
             threads: int = 1, recall_ceiling: float = 0.999) -> tuple[list[AblationRow], dict]:
    """Tune several hierarchy shapes on the same data and compare at shared cost budgets.

    Without explicit budgets, they are spaced geometrically from the largest
    minimum cost among the presets up to the largest cost at which any preset
    reaches ``recall_ceiling`` modeled recall.
    """
    hs, tuners = {}, {}
    for name in presets:
        hs[name] = build_hierarchy(ds, preset(name, ds.n, ds.d, seed=seed))
        tuners[name] = tuner_for(hs[name], qs_train, gt_train, k, threads)
    if budgets is None:
        lo = max(tu.cm.cost([tu.t_min] * tu.cm.m) for tu in tuners.values())
        hi = max(tu.for_loss(-np.log(recall_ceiling)).cost for tu in tuners.values())
        if hi <= lo:
            raise ExperimentError("no shared budget range between presets")
        budgets = np.geomspace(lo * 1.001, hi, n_budgets)
    rows = [AblationRow(float(J), {}, {}) for J in budgets]
    for name in presets:
        tunings = []
        for J in budgets:
            try:
                tunings.append(_at_budget(tuners[name], J))
            except TunerError:
                tunings.append(None)
        feasible = [t for t in tunings if t is not None]
        ev = iter(evaluate(hs[name], feasible, qs_eval, gt_eval, k, tuners[name].cm, threads=threads))
        for row, t in zip(rows, tunings):
            e = next(ev) if t is not None else None
            row.recalls[name] = e.recall if e else 0.0
            row.tunings[name] = e.tuning if e else None
    return rows, {name: h.footprints for name, h in hs.items()}
