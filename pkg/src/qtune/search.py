"""Multi-level quantized search, recall evaluation and benchmarking."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from qtune.dataset_io import GroundTruth, QuerySet
from qtune.quantization import QuantizationHierarchy, QuantizationLevel, RowScorer
from qtune.ranking import lex_order, select_positions, smallest_sorted


class TuningError(ValueError):
    pass


def validate_tuning(t, h: QuantizationHierarchy, k: int | None = None) -> np.ndarray:
    """Coerce ``t`` to an int array and check it against the hierarchy."""
    arr = np.asarray(t)
    if arr.ndim != 1 or arr.shape[0] != h.m:
        raise TuningError(f"tuning has {arr.size} entries, hierarchy has {h.m} levels")
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise TuningError("tuning entries must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() > h.n:
        raise TuningError(f"tuning entries must lie in [0, {h.n}]")
    if np.any(np.diff(arr) > 0):
        raise TuningError(f"tuning must be non-increasing, got {arr.tolist()}")
    if k is not None and arr[-1] < k:
        raise TuningError(f"final candidate count {arr[-1]} is below k={k}")
    return arr


@dataclass
class SearchTrace:
    """Candidate sets Cand_1..Cand_m (Cand_0 is implicit) plus byte accounting.

    ``scored[i]`` is |Cand_{i-1}|, the number of datapoints whose level-i
    encoding is read; each such read is charged ``footprint_i / n`` bytes.
    """

    candidates: list = field(default_factory=list)
    scored: list = field(default_factory=list)
    bytes_accessed: list = field(default_factory=list)

    @property
    def total_bytes(self) -> Fraction:
        return sum(self.bytes_accessed, Fraction(0))


def _gather_members(offsets: np.ndarray, members: np.ndarray, rows: np.ndarray) -> np.ndarray:
    if rows.size == 0:
        return members[:0]
    starts, ends = offsets[rows], offsets[rows + 1]
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return members[:0]
    shift = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return members[np.arange(total) + shift]


class QueryContext:
    """Per-query scorers for every level, optionally caching full distance arrays.

    With ``cache=True`` many tunings can be evaluated against one query at
    the cost of computing every level's distances once.
    """

    def __init__(self, h: QuantizationHierarchy, q: np.ndarray, cache: bool = False):
        self.h = h
        self.q = np.asarray(q)
        self.cache = cache
        self.scorers: list[RowScorer] = h.scorers(q)
        self._row_order: dict[int, tuple] = {}

    def point_distances(self, i: int, points: np.ndarray) -> np.ndarray:
        sc = self.scorers[i]
        if self.cache:
            sc.full()
        return sc.points(points)

    def _sorted_rows(self, i: int):
        if i not in self._row_order:
            lvl = self.h.levels[i]
            rd = self.scorers[i].full()
            offsets, members = lvl.buckets()
            order = np.argsort(rd, kind="stable")
            sizes = np.diff(offsets)[order]
            self._row_order[i] = (rd[order], order, np.cumsum(sizes), offsets, members)
        return self._row_order[i]

    def select_from_all(self, i: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        """The t best datapoints of the whole dataset under level i, with distances."""
        lvl: QuantizationLevel = self.h.levels[i]
        n = self.h.n
        if not lvl.is_broadcast:
            dist = self.scorers[i].full()
            pos = select_positions(dist, np.arange(n), t)
            return pos, dist[pos]
        if t <= 0:
            return np.arange(0), np.arange(0, dtype=np.float64)
        rs, order, csum, offsets, members = self._sorted_rows(i)
        t = min(t, n)
        p = int(np.searchsorted(csum, t, side="left"))
        boundary = rs[p]
        lo = int(np.searchsorted(rs, boundary, side="left"))
        hi = int(np.searchsorted(rs, boundary, side="right"))
        full_rows = order[:lo]
        taken = _gather_members(offsets, members, full_rows)
        tied = np.sort(_gather_members(offsets, members, order[lo:hi]))[: t - taken.shape[0]]
        pts = np.concatenate([taken, tied])
        return pts, self.scorers[i].full()[lvl.row_of_point[pts]]


def quantized_search(h: QuantizationHierarchy, t, q: np.ndarray, trace: bool = False,
                     context: QueryContext | None = None):
    """Progressively narrow the candidate set level by level.

    Level i keeps the ``t[i]`` candidates of the previous set with the
    smallest level-i distance (ties by datapoint index). Returns the final
    candidates sorted by final-level distance, plus a SearchTrace when asked.
    """
    t = validate_tuning(t, h)
    if np.asarray(q).shape != (h.d,):
        raise TuningError(f"query must have dimension {h.d}")
    ctx = context if context is not None else QueryContext(h, q)
    tr = SearchTrace() if trace else None
    cand, dist = None, None
    for i, lvl in enumerate(h.levels):
        ti = int(t[i])
        if cand is None:
            scored = h.n
            cand, dist = ctx.select_from_all(i, ti)
        else:
            scored = cand.shape[0]
            d_all = ctx.point_distances(i, cand)
            pos = select_positions(d_all, cand, ti)
            cand, dist = cand[pos], d_all[pos]
        if tr is not None:
            tr.candidates.append(np.sort(cand))
            tr.scored.append(scored)
            tr.bytes_accessed.append(Fraction(scored * lvl.footprint_bytes, h.n))
    order = lex_order(dist, cand)
    result = cand[order]
    return (result, tr) if trace else result


def single_layer_topk(level: QuantizationLevel, metric, q: np.ndarray, depth: int) -> np.ndarray:
    """The ``depth`` datapoints closest to q under one level alone, sorted by (distance, index)."""
    if not 0 <= depth <= level.n:
        raise TuningError(f"depth must lie in [0, {level.n}]")
    dist = level.scorer(metric, q).all_points()
    return smallest_sorted(dist, np.arange(level.n), depth)[0]


# --------------------------------------------------------------------------
# recall

RECALL_FLOOR = 0.5


@dataclass
class RecallReport:
    per_query: np.ndarray
    mean: float
    geometric_mean: float


def evaluate_recall(results, gt: GroundTruth, k: int, floor: float = RECALL_FLOOR) -> RecallReport:
    """recall@k per query, with arithmetic and floored geometric means."""
    if k > gt.k:
        raise TuningError(f"k={k} exceeds ground truth depth {gt.k}")
    if len(results) != gt.n_q:
        raise TuningError("one result list per ground-truth query required")
    hits = np.empty(gt.n_q, dtype=np.int64)
    for a, res in enumerate(results):
        top = np.asarray(res)[:k]
        hits[a] = np.intersect1d(top, gt.indices[a, :k]).shape[0]
    per_query = hits / k
    geo = float(np.exp(np.mean(np.log(np.maximum(hits, floor) / k))))
    return RecallReport(per_query, float(per_query.mean()), geo)


# --------------------------------------------------------------------------
# benchmarking

@dataclass
class BenchRow:
    tuning: list
    recall: float
    geometric_recall: float
    bytes_per_query: Fraction
    seconds_per_query: float | None = None

    @property
    def qps(self) -> float | None:
        if not self.seconds_per_query:
            return None
        return 1.0 / self.seconds_per_query


def _run_chunk(h, tunings, queries, rows, k):
    results = [[None] * len(rows) for _ in tunings]
    total_bytes = [Fraction(0)] * len(tunings)
    for pos, a in enumerate(rows):
        ctx = QueryContext(h, queries[a], cache=True)
        for ti, t in enumerate(tunings):
            res, tr = quantized_search(h, t, queries[a], trace=True, context=ctx)
            results[ti][pos] = res[:k]
            total_bytes[ti] += tr.total_bytes
    return results, total_bytes


def bench(h: QuantizationHierarchy, tunings, qs: QuerySet, gt: GroundTruth, k: int, threads: int = 1,
          timing: bool = False, repeats: int = 5, timing_queries: int | None = None) -> list[BenchRow]:
    """Recall and instrumented bytes for each tuning; optional wall-clock timing.

    Recall and bytes come from one cached pass (each query's level distances
    are computed once and shared by all tunings). Timing, when requested,
    runs each tuning uncached: one warmup pass, then the median of
    ``repeats`` passes.
    """
    tunings = [validate_tuning(t, h, k) for t in tunings]
    chunks = [c for c in np.array_split(np.arange(qs.n_q), max(1, threads)) if c.size]
    if threads <= 1 or len(chunks) == 1:
        parts = [_run_chunk(h, tunings, qs.queries, c, k) for c in chunks]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: _run_chunk(h, tunings, qs.queries, c, k), chunks))
    rows = []
    for ti, t in enumerate(tunings):
        results = [r for part in parts for r in part[0][ti]]
        total = sum((part[1][ti] for part in parts), Fraction(0))
        rep = evaluate_recall(results, gt, k)
        rows.append(BenchRow(t.tolist(), rep.mean, rep.geometric_mean, total / qs.n_q))
    if timing:
        sample = qs.queries[: timing_queries or qs.n_q]
        for row, t in zip(rows, tunings):
            for q in sample[: min(len(sample), 10)]:
                quantized_search(h, t, q)
            runs = []
            for _ in range(repeats):
                start = time.perf_counter()
                for q in sample:
                    quantized_search(h, t, q)
                runs.append((time.perf_counter() - start) / len(sample))
            row.seconds_per_query = float(np.median(runs))
    return rows
