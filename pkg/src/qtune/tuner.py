"""Cost model and Lagrangian tuning over convex per-level loss curves.

The tuner minimizes ``sum_i hull_i(t_i) + lam * J(t)`` subject to
``n >= t_1 >= ... >= t_m >= t_min`` for a multiplier ``lam >= 0``. Sweeping
``lam`` traces the loss/cost Pareto frontier; budget-constrained tunings are
found by searching over ``lam``.

Only the union of the hulls' breakpoints (plus ``t_min`` and ``n``) is
ever considered as a value of ``t_i``: every objective row is linear
between consecutive breakpoints, so some optimum always sits on them.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from qtune.recall_stats import ConvexLossCurve, LossMatrix, hulls


class TunerError(ValueError):
    pass


class InfeasibleTarget(TunerError):
    """A cost budget or recall target that no tuning can meet."""


# --------------------------------------------------------------------------
# cost model

@dataclass(frozen=True)
class CostModel:
    """Linear memory-traffic model: J(t) = a_0 + sum_{i<m} a_i t_i.

    ``a_0`` is the first level's footprint over the dataset size; a_i is
    the next level's footprint per datapoint over the dataset size. The last
    candidate count carries no cost.
    """

    footprints: tuple
    n: int
    dataset_nbytes: int

    def __post_init__(self):
        object.__setattr__(self, "footprints", tuple(int(f) for f in self.footprints))
        if not self.footprints:
            raise TunerError("cost model needs at least one level")
        if self.n < 1 or self.dataset_nbytes < 1:
            raise TunerError("n and dataset size must be positive")
        if any(f <= 0 for f in self.footprints):
            raise TunerError("footprints must be positive")

    @classmethod
    def from_hierarchy(cls, h) -> "CostModel":
        return cls(tuple(h.footprints), h.n, h.dataset_nbytes)

    @property
    def m(self) -> int:
        return len(self.footprints)

    @property
    def a0(self) -> float:
        return self.footprints[0] / self.dataset_nbytes

    @property
    def coefficients(self) -> np.ndarray:
        """a_1..a_m as floats, with a_m = 0."""
        a = [f / (self.n * self.dataset_nbytes) for f in self.footprints[1:]]
        return np.array(a + [0.0])

    def _check(self, t) -> list[int]:
        t = [int(x) for x in t]
        if len(t) != self.m:
            raise TunerError(f"tuning has {len(t)} entries, cost model has {self.m} levels")
        return t

    def bytes_per_query(self, t) -> Fraction:
        t = self._check(t)
        total = Fraction(self.footprints[0])
        for ti, f in zip(t[:-1], self.footprints[1:]):
            total += Fraction(ti * f, self.n)
        return total

    def cost(self, t) -> float:
        return float(self.bytes_per_query(t) / self.dataset_nbytes)

    def batched_cost(self, t, batch: int, rho: float) -> float:
        """Roofline cost of a batch of ``batch`` queries, per dataset byte."""
        t = self._check(t)
        if rho <= 0:
            raise TunerError("rho must be positive")
        if batch < 1:
            raise TunerError("batch size must be >= 1")
        alphas = [1.0] + [ti / self.n for ti in t[:-1]]
        total = 0.0
        for alpha, f in zip(alphas, self.footprints):
            total += max(alpha * batch / rho, min(1.0, alpha * batch)) * f
        return total / self.dataset_nbytes


def cost(t, cm: CostModel) -> float:
    return cm.cost(t)


def batched_cost(t, batch: int, rho: float, cm: CostModel) -> float:
    return cm.batched_cost(t, batch, rho)


# --------------------------------------------------------------------------
# the Lagrangian program

@dataclass
class Solution:
    lam: float
    t: list
    objective: float     # sum of hull values plus lam * (J - a_0)
    loss: float          # sum of hull values
    cost: float          # J(t)
    units: int = field(default=0, repr=False, compare=False)   # exact objective in grid units

    @property
    def proxy_recall(self) -> float:
        return math.exp(-self.loss)


# Hull slopes are snapped to integer multiples of 2^-e per unit depth. Integer
# slopes stay exactly convex, so every solver works in exact integer
# arithmetic and their answers cannot drift apart through rounding.
_SLOPE_BITS = 50      # |slope| * 2^e stays below 2^50
_VALUE_BITS = 60      # m * |value| * 2^e stays below 2^60


@dataclass(frozen=True)
class _Grid:
    exp: int
    knots: list           # per level: depths (int64)
    slopes: list          # per level: integer slope per unit depth, non-decreasing
    anchors: list         # per level: integer value at each knot


def _discretize(curves: list[ConvexLossCurve]) -> _Grid:
    raw = [c.slopes for c in curves]
    max_slope = max((float(np.max(np.abs(r))) for r in raw if r.size), default=0.0)
    max_value = max(float(np.max(np.abs(c.values))) for c in curves)
    exp = _VALUE_BITS - math.ceil(math.log2(len(curves) * max_value + 1.0))
    if max_slope > 0:
        exp = min(exp, _SLOPE_BITS - math.ceil(math.log2(max_slope)))
    slopes, anchors = [], []
    for c, r in zip(curves, raw):
        q = np.maximum.accumulate(np.rint(np.ldexp(r, exp)).astype(np.int64))
        steps = q * np.diff(c.depths)
        last = int(np.rint(math.ldexp(float(c.values[-1]), exp)))
        v = last - np.concatenate([np.cumsum(steps[::-1])[::-1], [0]])
        slopes.append(q)
        anchors.append(v.astype(np.int64))
    return _Grid(exp, [c.depths.astype(np.int64) for c in curves], slopes, anchors)


def _to_float(units: int, exp: int) -> float:
    return math.ldexp(float(units), -exp)


class LagrangianProblem:
    """Per-level objective rows on a shared column grid, reusable across lam.

    Rows are held in integer units of 2^-exp: ``H[i, j]`` is the snapped
    hull of level i at column j and ``lam * a_i`` becomes an integer cost per
    unit depth, so ``row(i, lam)`` is exact and convex. Losses and
    objectives are converted back to floats only when a Solution is built.
    """

    def __init__(self, curves: list[ConvexLossCurve], cm: CostModel, t_min: int):
        if len(curves) != cm.m:
            raise TunerError(f"{len(curves)} curves for a {cm.m}-level cost model")
        n = cm.n
        if not 0 <= t_min <= n:
            raise TunerError(f"t_min={t_min} infeasible for n={n}")
        for c in curves:
            if c.depths[0] > t_min or c.depths[-1] != n:
                raise TunerError("every hull must span [t_min, n]")
            sl = c.slopes
            # slopes recomputed from rounded values can dip by a few ulps at repeated slopes
            if sl.size > 1 and np.any(np.diff(sl) < -1e-9 * max(1.0, float(np.max(np.abs(sl))))):
                raise TunerError("loss curves must be convex")
        self.curves, self.cm, self.t_min, self.n = curves, cm, t_min, n
        cols = np.unique(np.concatenate([[t_min, n]] + [c.depths[c.depths >= t_min] for c in curves]))
        self.columns = cols.astype(np.int64)
        self.a = cm.coefficients
        self.grid = _discretize(curves)
        self.exp = self.grid.exp
        H = np.empty((cm.m, cols.size), dtype=np.int64)
        for i, (x, q, v) in enumerate(zip(self.grid.knots, self.grid.slopes, self.grid.anchors)):
            seg = np.clip(np.searchsorted(x, self.columns, side="right") - 1, 0, max(x.size - 2, 0))
            H[i] = v[seg] + (q[seg] * (self.columns - x[seg]) if q.size else 0)
        self.H = H
        self._cols = self.columns.tolist()
        # Fraction(a_i) * 2^exp, for turning lam into integer unit costs
        self._a_scaled = [Fraction(float(x)) * Fraction(2) ** self.exp for x in self.a]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.columns.shape[0]

    def hull_values(self) -> np.ndarray:
        """Snapped hulls at the columns, as floats."""
        return np.ldexp(self.H.astype(np.float64), -self.exp)

    def unit_costs(self, lam: float) -> list[int]:
        """Integer cost per unit depth, lam * a_i in grid units, rounded half to even."""
        _check_lam(lam)
        lf = Fraction(lam)
        return [round(lf * a) for a in self._a_scaled]

    def row(self, i: int, lam: float) -> np.ndarray:
        k = self.unit_costs(lam)[i]
        bound = int(np.max(np.abs(self.H))) * self.m + abs(k) * self.n * self.m
        if bound < 2**62:
            return self.H[i] + np.int64(k) * self.columns
        return self.H[i].astype(object) + k * self.columns.astype(object)

    def entry(self, i: int, j: int, lam: float) -> int:
        return int(self.H[i, j]) + self.unit_costs(lam)[i] * self._cols[j]

    def solution(self, lam: float, cols, units: int) -> Solution:
        t = [self._cols[j] for j in cols]
        loss = sum(int(self.H[i, j]) for i, j in enumerate(cols))
        return Solution(lam, t, _to_float(units, self.exp), _to_float(loss, self.exp), self.cm.cost(t), units)

    # --- basic O(N m) dynamic program -------------------------------------
    def solve_basic(self, lam: float) -> Solution:
        """Suffix-minimum DP over columns; ties go to the larger depth."""
        prev = 0
        g_rows = []
        for i in range(self.m):
            g = self.row(i, lam) + prev
            g_rows.append(g)
            prev = np.minimum.accumulate(g[::-1])[::-1]
        cols = [0] * self.m
        lo = 0
        for i in reversed(range(self.m)):
            seg = g_rows[i][lo:]
            j = lo + int(np.flatnonzero(seg == seg.min())[-1])
            cols[i] = lo = j
        return self.solution(lam, cols, int(prev[0]))

    # --- fast component solver ----------------------------------------------
    def solve_fast(self, lam: float, audit: bool = False):
        """Same optimum as ``solve_basic`` in O(m^2 log N) per call.

        The running suffix-minimum is kept implicitly as components: column
        ranges on which it equals a constant plus the sum of the most recent
        rows. Each row's rightmost minimum is found by binary search on the
        convex function those components define. With ``audit=True`` the
        materialized suffix-minimum rows are returned as well.
        """
        ks = self.unit_costs(lam)
        N, m = self.N, self.m
        H, cols = self.H, self._cols
        if audit and N > 4096:
            raise TunerError("audit mode is limited to 4096 columns")
        # component k covers columns [starts[k], next start); value = const + rows first_row..i
        starts, first_row, consts = [0], [0], [0]
        jstar = []
        audit_rows = []

        def g(i, j):
            k = bisect.bisect_right(starts, j) - 1
            v = consts[k]
            for r in range(first_row[k], i + 1):
                v += int(H[r, j]) + ks[r] * cols[j]
            return v

        best = 0
        for i in range(m):
            lo, hi = 0, N - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if g(i, mid + 1) > g(i, mid):
                    hi = mid
                else:
                    lo = mid + 1
            j = lo
            best = g(i, j)
            jstar.append(j)
            if audit:
                row = [g(i, c) for c in range(N)]
                audit_rows.append(np.array(row, dtype=object if max(map(abs, row)) >= 2**62 else np.int64))
            keep = bisect.bisect_right(starts, j) - 1
            if j > 0:
                ns, nr, nc = [0, j], [i + 1, first_row[keep]], [best, consts[keep]]
            else:
                ns, nr, nc = [0], [first_row[keep]], [consts[keep]]
            ns += starts[keep + 1:]
            nr += first_row[keep + 1:]
            nc += consts[keep + 1:]
            starts, first_row, consts = ns, nr, nc
        cols_out = [0] * m
        cols_out[m - 1] = jstar[m - 1]
        for i in reversed(range(m - 1)):
            cols_out[i] = max(jstar[i], cols_out[i + 1])
        sol = self.solution(lam, cols_out, best)
        return (sol, audit_rows) if audit else sol

    def materialize_suffix_min(self, i: int, lam: float) -> np.ndarray:
        """Explicit suffix-minimum row after level i."""
        prev = 0
        for r in range(i + 1):
            prev = np.minimum.accumulate((self.row(r, lam) + prev)[::-1])[::-1]
        return prev

    # --- multipliers ------------------------------------------------------
    def candidate_lambdas(self) -> np.ndarray:
        return _candidates(self.grid, self.a)

    def lam_upper(self) -> float:
        """A multiplier large enough that every costly level sits at t_min."""
        cands = self.candidate_lambdas()
        return 2.0 * float(cands[-1]) + 1.0 if cands.size else 1.0


def _check_lam(lam: float):
    if not lam >= 0 or not math.isfinite(lam):
        raise TunerError(f"lambda must be finite and >= 0, got {lam}")


def _candidates(grid: _Grid, a: np.ndarray) -> np.ndarray:
    out = []
    for i, q in enumerate(grid.slopes[:-1]):
        q = q[q < 0]
        # the unit cost round(lam * a_i * 2^e) equals -q exactly at these lam
        out.append(-q.astype(np.float64) / math.ldexp(float(a[i]), grid.exp))
    if not out:
        return np.array([])
    return np.unique(np.concatenate(out))


def candidate_lambdas(curves: list[ConvexLossCurve], cm: CostModel) -> np.ndarray:
    """|slope| / a_i for every hull segment of every costly level, ascending and deduplicated.

    Slopes are the snapped ones the solvers use, so at each candidate the
    corresponding row is exactly flat on that segment.
    """
    return _candidates(_discretize(curves), cm.coefficients)


def solve_lagrangian_basic(lam, curves, cm, t_min) -> Solution:
    return LagrangianProblem(curves, cm, t_min).solve_basic(lam)


def solve_lagrangian_fast(lam, curves, cm, t_min) -> Solution:
    return LagrangianProblem(curves, cm, t_min).solve_fast(lam)


# --------------------------------------------------------------------------
# targets and frontiers

def _intersection_refine(prob: LagrangianProblem, A: Solution, B: Solution, feasible) -> tuple[Solution, Solution]:
    """Narrow a (costlier A, cheaper B) bracket to adjacent frontier vertices.

    Candidate multipliers come from hull slopes of individual levels, which
    can skip vertices created by the coupling between levels; the
    multiplier equalizing A and B exposes any vertex in between.
    """
    for _ in range(10_000):
        dj = A.cost - B.cost
        if dj <= 0:
            break
        lam = (B.loss - A.loss) / dj
        if not (math.isfinite(lam) and lam >= 0):
            break
        Cs = prob.solve_fast(lam)
        fa = A.loss + lam * A.cost
        fc = Cs.loss + lam * Cs.cost
        if not fc < fa - 1e-12 * (abs(fa) + 1.0) or Cs.t in (A.t, B.t):
            break
        if feasible(Cs):
            B = Cs
        else:
            A = Cs
    return A, B


def _probes(prob: LagrangianProblem) -> list[float]:
    return [0.0] + prob.candidate_lambdas().tolist() + [prob.lam_upper()]


def tune_for_cost(J_max: float, curves, cm: CostModel, t_min: int, problem: LagrangianProblem | None = None) -> Solution:
    """Lowest-loss frontier tuning whose modeled cost is at most J_max."""
    prob = problem or LagrangianProblem(curves, cm, t_min)
    floor_cost = cm.cost([t_min] * cm.m)
    if J_max < floor_cost:
        raise InfeasibleTarget(f"cost budget {J_max} is below the minimum achievable cost {floor_cost}")
    lams = _probes(prob)
    feasible = lambda s: s.cost <= J_max  # noqa: E731
    first = prob.solve_fast(lams[0])
    if feasible(first):
        return first
    lo, hi = 0, len(lams) - 1      # lams[lo] infeasible, lams[hi] feasible
    sols = {0: first, hi: prob.solve_fast(lams[hi])}
    while hi - lo > 1:
        mid = (lo + hi) // 2
        sols[mid] = prob.solve_fast(lams[mid])
        if feasible(sols[mid]):
            hi = mid
        else:
            lo = mid
    _, best = _intersection_refine(prob, sols[lo], sols[hi], feasible)
    return best


def tune_for_recall(loss_max: float, curves, cm: CostModel, t_min: int,
                    problem: LagrangianProblem | None = None) -> Solution:
    """Cheapest frontier tuning whose modeled loss is at most loss_max."""
    prob = problem or LagrangianProblem(curves, cm, t_min)
    lams = _probes(prob)
    feasible = lambda s: s.loss <= loss_max  # noqa: E731
    first = prob.solve_fast(lams[0])
    if not feasible(first):
        raise InfeasibleTarget(f"loss target {loss_max} is below the smallest achievable loss {first.loss}")
    lo, hi = 0, len(lams) - 1      # lams[lo] feasible; is lams[hi]?
    last = prob.solve_fast(lams[hi])
    if feasible(last):
        return last
    sols = {0: first, hi: last}
    while hi - lo > 1:
        mid = (lo + hi) // 2
        sols[mid] = prob.solve_fast(lams[mid])
        if feasible(sols[mid]):
            lo = mid
        else:
            hi = mid
    # here the cheaper side of the bracket is the infeasible one
    best, _ = _intersection_refine(prob, sols[lo], sols[hi], lambda s: not feasible(s))
    return best


@dataclass
class ParetoFrontier:
    points: list          # Solution entries sorted by cost

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def at_cost(self, J: float) -> Solution | None:
        """Best point with cost at most J."""
        best = None
        for p in self.points:
            if p.cost <= J:
                best = p
        return best


def pareto_frontier(curves, cm: CostModel, t_min: int, problem: LagrangianProblem | None = None) -> ParetoFrontier:
    """Every distinct Lagrangian optimum, sorted by cost with dominated points removed."""
    prob = problem or LagrangianProblem(curves, cm, t_min)
    lams = _probes(prob)
    sols = [prob.solve_fast(x) for x in lams]
    found = {tuple(s.t): s for s in sols}
    ordered = sorted(found.values(), key=lambda s: (s.cost, s.loss))
    # fill in vertices hidden between consecutive optima
    stack = list(zip(ordered[1:], ordered[:-1]))
    while stack:
        A, B = stack.pop()
        if A.cost <= B.cost:
            continue
        lam = (B.loss - A.loss) / (A.cost - B.cost)
        if not (math.isfinite(lam) and lam >= 0):
            continue
        Cs = prob.solve_fast(lam)
        key = tuple(Cs.t)
        fa = A.loss + lam * A.cost
        fc = Cs.loss + lam * Cs.cost
        if key in found or not fc < fa - 1e-12 * (abs(fa) + 1.0):
            continue
        found[key] = Cs
        stack += [(A, Cs), (Cs, B)]
    ordered = sorted(found.values(), key=lambda s: (s.cost, s.loss))
    frontier = []
    for s in ordered:
        if frontier and s.cost == frontier[-1].cost:
            continue
        if frontier and s.loss >= frontier[-1].loss:
            continue
        frontier.append(s)
    for a, b in zip(frontier, frontier[1:]):
        assert a.cost < b.cost and a.loss > b.loss, "frontier contains a dominated point"
    return ParetoFrontier(frontier)


# --------------------------------------------------------------------------
# convenience wrapper

class Tuner:
    """Hulls, cost model and column grid prepared once for repeated queries."""

    def __init__(self, lm: LossMatrix, cm: CostModel, t_min: int | None = None):
        if lm.m != cm.m or lm.n != cm.n:
            raise TunerError("loss matrix and cost model disagree on m or n")
        self.lm, self.cm = lm, cm
        self.t_min = lm.k if t_min is None else t_min
        self.curves = hulls(lm, self.t_min)
        self.problem = LagrangianProblem(self.curves, cm, self.t_min)

    def for_cost(self, J_max: float) -> Solution:
        return tune_for_cost(J_max, self.curves, self.cm, self.t_min, self.problem)

    def for_recall(self, recall: float) -> Solution:
        if not 0 < recall <= 1:
            raise TunerError("recall target must lie in (0, 1]")
        return tune_for_recall(-math.log(recall), self.curves, self.cm, self.t_min, self.problem)

    def for_loss(self, loss_max: float) -> Solution:
        return tune_for_recall(loss_max, self.curves, self.cm, self.t_min, self.problem)

    def frontier(self) -> ParetoFrontier:
        return pareto_frontier(self.curves, self.cm, self.t_min, self.problem)

    def solve(self, lam: float) -> Solution:
        return self.problem.solve_fast(lam)
