"""Per-level recall-loss curves from a query sample, and their convex hulls.

For every query a, level b and ground-truth neighbor c we record

* ``U[a, b, c]``: the level-b quantized distance of the c-th ground-truth
  point (each ``U[a, b]`` sorted by (distance, index)), and
* ``V[a, b, c]``: how many datapoints precede that point in level b's
  (distance, index) order.

A single-level candidate set of depth t then holds neighbor c exactly when
``V[a, b, c] < t``, so the number of neighbors recovered at every depth is
a step function with at most k steps per query. The loss of level b at
depth t is the query mean of ``-log(max(hits, floor) / k)``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qtune.dataset_io import GroundTruth, QuerySet
from qtune.quantization import QuantizationHierarchy

DEFAULT_FLOOR = 0.5
DENSE_LIMIT = 1 << 20
# every finite double is an integer multiple of 2**-1074
_EXACT_SCALE = 1 << 1074


class StatsError(ValueError):
    pass


def per_query_loss(hits: np.ndarray, k: int, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """-log(max(hits, floor) / k), elementwise."""
    return -np.log(np.maximum(hits, floor) / k)


@dataclass
class StatsWorkspace:
    U: np.ndarray           # n_q x m x k float64
    U_index: np.ndarray     # ground-truth point behind each U entry
    V: np.ndarray | None = None

    @property
    def shape(self):
        return self.U.shape


def _check_inputs(qs: QuerySet, gt: GroundTruth, h: QuantizationHierarchy):
    if qs.d != h.d:
        raise StatsError(f"query dimension {qs.d} does not match hierarchy dimension {h.d}")
    if gt.n_q != qs.n_q:
        raise StatsError("ground truth and query set sizes differ")
    if gt.indices.size and (gt.indices.min() < 0 or gt.indices.max() >= h.n):
        raise StatsError("ground truth indices out of range for this hierarchy")


def compute_U(qs: QuerySet, gt: GroundTruth, h: QuantizationHierarchy, threads: int = 1) -> StatsWorkspace:
    """Quantized distances of every ground-truth neighbor, per query and level."""
    _check_inputs(qs, gt, h)
    n_q, k, m = qs.n_q, gt.k, h.m
    U = np.empty((n_q, m, k))
    idx = np.empty((n_q, m, k), dtype=np.int64)

    def run(rows):
        for a in rows:
            g = gt.indices[a]
            for b, sc in enumerate(h.scorers(qs.queries[a])):
                u = sc.points(g).astype(np.float64)
                order = np.lexsort((g, u))
                U[a, b], idx[a, b] = u[order], g[order]

    _parallel(run, n_q, threads)
    return StatsWorkspace(U, idx)


def _ranks(rd: np.ndarray, sizes: np.ndarray | None, offsets, members, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Lexicographic ranks of points g (distances u, sorted) among all datapoints.

    ``rd`` holds one distance per table row; ``sizes`` the datapoints per row
    (None when rows are the datapoints themselves).
    """
    k = u.shape[0]
    # rows beyond the largest u never precede any neighbor
    near = np.flatnonzero(rd <= u[-1])
    rn = rd[near]
    right = np.searchsorted(u, rn, side="right")
    weights = None if sizes is None else sizes[near].astype(np.float64)
    less = np.cumsum(np.bincount(right, weights=weights, minlength=k + 1))[:k].astype(np.int64)
    # rows whose distance equals some u_c contribute their members below g_c
    left = np.searchsorted(u, rn, side="left")
    out = less
    for p in np.flatnonzero(left < right):
        r = near[p]
        for c in range(left[p], right[p]):
            if sizes is None:
                out[c] += int(r < g[c])
            else:
                bucket = members[offsets[r]:offsets[r + 1]]
                out[c] += int(np.searchsorted(bucket, g[c], side="left"))
    return out


def _exact_ranks(scanner, q: np.ndarray, approx: np.ndarray, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Lexicographic ranks on an exact level, screened by approximate distances.

    Points whose screening distance is within the error band of some u_c get
    their direct distance; all other comparisons are settled by the screen.
    """
    tol = scanner.tolerance(q)
    k = u.shape[0]
    near = np.flatnonzero(approx <= u[-1] + tol)
    an = approx[near]
    pos = np.searchsorted(u, an, side="right")
    out = np.cumsum(np.bincount(pos, minlength=k + 1))[:k].astype(np.int64)
    lo = np.searchsorted(u, an - tol, side="left")
    hi = np.searchsorted(u, an + tol, side="right")
    band = near[hi > lo]
    if band.size == 0:
        return out
    exact = scanner.exact(q, band)
    ab = approx[band]
    for c in range(k):
        screened = int(np.count_nonzero(ab < u[c]))
        true = int(np.count_nonzero((exact < u[c]) | ((exact == u[c]) & (band < g[c]))))
        out[c] += true - screened
    return out


def compute_V(ws: StatsWorkspace, h: QuantizationHierarchy, qs: QuerySet, threads: int = 1,
              block: int = 64) -> np.ndarray:
    """Rank counts: V[a, b, c] = #{j : (D_b(q_a, j), j) < (U[a, b, c], U_index[a, b, c])}."""
    n_q, m, k = ws.U.shape
    if m != h.m or n_q != qs.n_q:
        raise StatsError("workspace shape does not match hierarchy/query set")
    V = np.empty((n_q, m, k), dtype=np.int64)
    meta = []
    for lvl in h.levels:
        if lvl.kind == "exact":
            meta.append(("exact", lvl.scanner(h.metric)))
        elif lvl.is_broadcast:
            offsets, members = lvl.buckets()
            meta.append(("rows", (np.diff(offsets), offsets, members)))
        else:
            meta.append(("rows", (None, None, None)))

    def run(rows):
        for start in range(0, rows.shape[0], block):
            blk = rows[start:start + block]
            qb = qs.queries[blk].astype(np.float64)
            screens = {b: info.approx(qb) for b, (kind, info) in enumerate(meta) if kind == "exact"}
            for pos, a in enumerate(blk):
                scorers = h.scorers(qs.queries[a])
                for b, (kind, info) in enumerate(meta):
                    u, g = ws.U[a, b], ws.U_index[a, b]
                    if kind == "exact":
                        V[a, b] = _exact_ranks(info, qb[pos], screens[b][pos], u, g)
                    else:
                        V[a, b] = _ranks(scorers[b].full(), *info, u, g)

    _parallel(run, n_q, threads)
    ws.V = V
    return V


def _parallel(fn, count, threads):
    chunks = [c for c in np.array_split(np.arange(count), max(1, threads)) if c.size]
    if threads <= 1 or len(chunks) <= 1:
        for c in chunks:
            fn(c)
        return
    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(fn, chunks))


# --------------------------------------------------------------------------
# loss curves

@dataclass
class LossCurve:
    """Piecewise-constant loss of one level: ``values[i]`` holds on [depths[i], depths[i+1])."""

    depths: np.ndarray      # int64, starts at 0, ends at n
    values: np.ndarray      # float64

    def at(self, t) -> np.ndarray | float:
        pos = np.searchsorted(self.depths, t, side="right") - 1
        return self.values[pos]

    def dense(self) -> np.ndarray:
        n = int(self.depths[-1])
        runs = np.diff(np.append(self.depths, n + 1))
        return np.repeat(self.values, runs)


@dataclass
class LossMatrix:
    curves: list            # one LossCurve per level
    n: int
    k: int
    n_q: int
    floor: float = DEFAULT_FLOOR

    @property
    def m(self) -> int:
        return len(self.curves)

    def dense(self) -> np.ndarray:
        """The full m x (n+1) matrix; only for n up to 2**20."""
        if self.n > DENSE_LIMIT:
            raise StatsError(f"dense loss matrix refused for n={self.n} > {DENSE_LIMIT}")
        return np.vstack([c.dense() for c in self.curves])

    def value(self, level: int, t: int) -> float:
        if not 0 <= t <= self.n:
            raise StatsError(f"depth {t} out of range [0, {self.n}]")
        return float(self.curves[level].at(t))


def _exact_units(x: float) -> int:
    num, den = float(x).as_integer_ratio()
    return num * (_EXACT_SCALE // den)


def loss_matrix(V: np.ndarray, n: int, k: int, floor: float = DEFAULT_FLOOR) -> LossMatrix:
    """Mean floored log-loss of every level at every depth where it changes.

    Query means are exact: per-query terms are summed in integer units of
    2**-1074 and rounded once, so the result does not depend on the order
    in which queries enter.
    """
    if floor <= 0:
        raise StatsError("floor must be positive")
    V = np.asarray(V)
    if V.ndim != 3 or V.shape[2] != k:
        raise StatsError("V must be an n_q x m x k array")
    n_q, m, _ = V.shape
    table = per_query_loss(np.arange(k + 1), k, floor)
    units = [_exact_units(x) for x in table]
    step = [units[c + 1] - units[c] for c in range(k)]
    curves = []
    for b in range(m):
        vb = np.sort(V[:, b, :], axis=1)
        if vb.size and (vb.min() < 0 or vb.max() >= n):
            raise StatsError("V entries must lie in [0, n)")
        ev_depth = (vb + 1).ravel()
        ev_col = np.tile(np.arange(k), n_q)
        order = np.argsort(ev_depth, kind="stable")
        ev_depth, ev_col = ev_depth[order].tolist(), ev_col[order].tolist()
        total = n_q * units[0]
        depths, values = [0], [total / (_EXACT_SCALE * n_q)]
        for pos, (dep, col) in enumerate(zip(ev_depth, ev_col)):
            total += step[col]
            if pos + 1 == len(ev_depth) or ev_depth[pos + 1] != dep:
                depths.append(dep)
                values.append(total / (_EXACT_SCALE * n_q))
        if depths[-1] != n:
            depths.append(n)
            values.append(values[-1])
        curves.append(LossCurve(np.array(depths, dtype=np.int64), np.array(values)))
    return LossMatrix(curves, n, k, n_q, floor)


def compute_stats(qs: QuerySet, gt: GroundTruth, h: QuantizationHierarchy, k: int | None = None,
                  floor: float = DEFAULT_FLOOR, threads: int = 1) -> tuple[LossMatrix, StatsWorkspace]:
    k = gt.k if k is None else k
    if k > gt.k:
        raise StatsError(f"k={k} exceeds ground-truth depth {gt.k}")
    if k < gt.k:
        gt = GroundTruth(gt.indices[:, :k], gt.distances[:, :k], gt.metric)
    ws = compute_U(qs, gt, h, threads)
    compute_V(ws, h, qs, threads)
    return loss_matrix(ws.V, h.n, k, floor), ws


# --------------------------------------------------------------------------
# convex hulls

@dataclass
class ConvexLossCurve:
    """Lower convex hull of a loss curve, as integer breakpoints with values."""

    depths: np.ndarray
    values: np.ndarray

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.depths)

    def __call__(self, t):
        lo, hi = self.depths[0], self.depths[-1]
        if np.any(np.asarray(t) < lo) or np.any(np.asarray(t) > hi):
            raise StatsError(f"depth outside hull domain [{lo}, {hi}]")
        return np.interp(t, self.depths, self.values)


def lower_hull(xs, ys) -> ConvexLossCurve:
    """Monotone-chain lower hull of points already sorted by x."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0:
        raise StatsError("cannot convexify an empty row")
    hx, hy = [], []
    for x, y in zip(xs.tolist(), ys.tolist()):
        while len(hx) >= 2:
            ox, oy, ax, ay = hx[-2], hy[-2], hx[-1], hy[-1]
            # drop the middle point unless it lies strictly below the chord
            if (ax - ox) * (y - oy) - (ay - oy) * (x - ox) <= 0:
                hx.pop()
                hy.pop()
            else:
                break
        hx.append(x)
        hy.append(y)
    return ConvexLossCurve(np.array(hx, dtype=np.int64), np.array(hy))


def convexify(row) -> ConvexLossCurve:
    """Lower convex hull of a dense row sampled at depths 0..len(row)-1."""
    row = np.asarray(row, dtype=np.float64)
    return lower_hull(np.arange(row.shape[0]), row)


def convexify_curve(curve: LossCurve, lo: int = 0) -> ConvexLossCurve:
    """Hull of a step curve restricted to depths [lo, n].

    A non-increasing step function's hull only touches the left end of each
    run and the final depth, so the knots are enough.
    """
    n = int(curve.depths[-1])
    if not 0 <= lo <= n:
        raise StatsError(f"hull start {lo} outside [0, {n}]")
    keep = curve.depths > lo
    xs = np.concatenate([[lo], curve.depths[keep]])
    ys = np.concatenate([[curve.at(lo)], curve.values[keep]])
    return lower_hull(xs, ys)


def hulls(lm: LossMatrix, lo: int = 0) -> list[ConvexLossCurve]:
    return [convexify_curve(c, lo) for c in lm.curves]


def proxy_recall(t, curves) -> float:
    """exp(-sum of per-level hull losses at the tuning)."""
    t = np.asarray(t)
    if t.shape[0] != len(curves):
        raise StatsError("tuning length does not match curve count")
    return math.exp(-sum(float(c(int(ti))) for c, ti in zip(curves, t)))


# --------------------------------------------------------------------------
# persistence

def save_stats(directory: os.PathLike | str, lm: LossMatrix, h: QuantizationHierarchy,
               digest: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(lm.curves):
        pairs = np.column_stack([c.depths.astype(np.float64), c.values]).astype("<f8")
        (directory / f"level{i}.loss.f64").write_bytes(pairs.tobytes())
    manifest = {"format": "qtune-stats/1", "m": lm.m, "n": lm.n, "k": lm.k, "n_q": lm.n_q, "floor": lm.floor,
                "hierarchy_digest": digest if digest is not None else h.digest(),
                "footprints": h.footprints, "dataset_nbytes": h.dataset_nbytes, "metric": h.metric.value}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


@dataclass
class LoadedStats:
    loss: LossMatrix
    footprints: list
    dataset_nbytes: int
    hierarchy_digest: str
    metric: str


def load_stats(directory: os.PathLike | str) -> LoadedStats:
    directory = Path(directory)
    try:
        man = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise StatsError(f"no stats manifest in {directory}") from exc
    curves = []
    for i in range(man["m"]):
        raw = np.frombuffer((directory / f"level{i}.loss.f64").read_bytes(), dtype="<f8").reshape(-1, 2)
        curves.append(LossCurve(raw[:, 0].astype(np.int64), raw[:, 1].astype(np.float64)))
    lm = LossMatrix(curves, man["n"], man["k"], man["n_q"], man["floor"])
    return LoadedStats(lm, list(man["footprints"]), man["dataset_nbytes"], man["hierarchy_digest"], man["metric"])
