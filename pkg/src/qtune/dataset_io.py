"""Vector datasets, the fvecs/bvecs/ivecs formats, and exact ground truth."""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qtune.ranking import smallest_sorted


class DatasetError(ValueError):
    """Malformed dataset files or inconsistent dataset shapes."""


class Metric(str, enum.Enum):
    SQUARED_EUCLIDEAN = "squared_euclidean"
    NEGATED_INNER_PRODUCT = "negated_inner_product"

    @classmethod
    def parse(cls, value: "str | Metric") -> "Metric":
        try:
            return cls(value)
        except ValueError:
            raise DatasetError(f"unknown metric {value!r}") from None


_ELEMENT_BYTES = {"float32": 4, "uint8": 1}


@dataclass(frozen=True)
class Dataset:
    """An n x d matrix of vectors.

    ``vectors`` is always float32 internally; ``element_kind`` remembers the
    on-disk element type so that saving reproduces the original bytes and so
    that ``nbytes`` (the ``|X|`` of the cost model) counts stored bytes.
    """

    vectors: np.ndarray
    element_kind: str = "float32"

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise DatasetError("dataset must be a 2-D matrix")
        if v.shape[0] < 1:
            raise DatasetError("empty dataset")
        if v.shape[1] < 1:
            raise DatasetError("dimensionality must be positive")
        if self.element_kind not in _ELEMENT_BYTES:
            raise DatasetError(f"unsupported element kind {self.element_kind!r}")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def bytes_per_dim(self) -> int:
        return _ELEMENT_BYTES[self.element_kind]

    @property
    def nbytes(self) -> int:
        return self.n * self.d * self.bytes_per_dim


@dataclass(frozen=True)
class QuerySet:
    queries: np.ndarray

    def __post_init__(self):
        q = np.array(self.queries, dtype=np.float32)
        if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] < 1:
            raise DatasetError("query set must be a non-empty 2-D matrix")
        q.setflags(write=False)
        object.__setattr__(self, "queries", q)

    @property
    def n_q(self) -> int:
        return self.queries.shape[0]

    @property
    def d(self) -> int:
        return self.queries.shape[1]

    def subset(self, rows) -> "QuerySet":
        return QuerySet(self.queries[np.asarray(rows)])


@dataclass(frozen=True)
class GroundTruth:
    """Exact k-NN indices and distances; rows sorted by (distance, index)."""

    indices: np.ndarray
    distances: np.ndarray
    metric: Metric = Metric.SQUARED_EUCLIDEAN

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_q(self) -> int:
        return self.indices.shape[0]

    def subset(self, rows) -> "GroundTruth":
        rows = np.asarray(rows)
        return GroundTruth(self.indices[rows], self.distances[rows], self.metric)


# --------------------------------------------------------------------------
# distances

def distance(metric: Metric | str, a, b) -> float:
    """Distance between two vectors under ``metric`` (double precision)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DatasetError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if Metric.parse(metric) is Metric.SQUARED_EUCLIDEAN:
        diff = a - b
        return float((diff * diff).sum())
    return float(-(a * b).sum())


def point_distances(metric: Metric, q: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Distances from ``q`` to every row of ``rows``.

    Elementwise arithmetic reduced along the contiguous axis, so a row's value
    does not depend on which other rows are in the batch. Search, ground truth
    and loss statistics all rely on that to agree bit for bit.
    """
    if metric is Metric.SQUARED_EUCLIDEAN:
        diff = rows - q
        return (diff * diff).sum(axis=1)
    return -(rows * q).sum(axis=1)


# --------------------------------------------------------------------------
# file formats

_HEADER = np.dtype("<i4")
_PAYLOAD = {"fvecs": np.dtype("<f4"), "bvecs": np.dtype("u1"), "ivecs": np.dtype("<i4")}


def _read_records(path: os.PathLike | str, fmt: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        raise DatasetError("empty dataset")
    if len(raw) < 4:
        raise DatasetError("truncated file: incomplete header")
    d = int(np.frombuffer(raw, dtype=_HEADER, count=1)[0])
    if d <= 0:
        raise DatasetError(f"invalid dimensionality {d}")
    payload = _PAYLOAD[fmt]
    rec = 4 + d * payload.itemsize
    if len(raw) % rec:
        raise DatasetError("truncated file: size is not a multiple of the record size")
    n = len(raw) // rec
    rec_dtype = np.dtype([("d", _HEADER), ("v", payload, (d,))])
    arr = np.frombuffer(raw, dtype=rec_dtype, count=n)
    if np.any(arr["d"] != d):
        raise DatasetError("inconsistent per-record dimensionality")
    return np.array(arr["v"])


def _write_records(path: os.PathLike | str, matrix: np.ndarray, fmt: str) -> None:
    payload = _PAYLOAD[fmt]
    n, d = matrix.shape
    rec_dtype = np.dtype([("d", _HEADER), ("v", payload, (d,))])
    out = np.empty(n, dtype=rec_dtype)
    out["d"] = d
    out["v"] = matrix
    Path(path).write_bytes(out.tobytes())


def load_vectors(path: os.PathLike | str, format: str | None = None) -> Dataset:
    """Load an fvecs or bvecs file; bvecs elements are widened to float32."""
    fmt = format or Path(path).suffix.lstrip(".")
    if fmt not in ("fvecs", "bvecs"):
        raise DatasetError(f"unsupported vector format {fmt!r}")
    vecs = _read_records(path, fmt)
    return Dataset(vecs.astype(np.float32), "float32" if fmt == "fvecs" else "uint8")


def save_vectors(path: os.PathLike | str, ds: Dataset, format: str | None = None) -> None:
    fmt = format or ("fvecs" if ds.element_kind == "float32" else "bvecs")
    if fmt == "bvecs":
        _write_records(path, ds.vectors.astype(np.uint8), "bvecs")
    elif fmt == "fvecs":
        _write_records(path, ds.vectors, "fvecs")
    else:
        raise DatasetError(f"unsupported vector format {fmt!r}")


def load_ivecs(path: os.PathLike | str) -> np.ndarray:
    return _read_records(path, "ivecs")


def save_ivecs(path: os.PathLike | str, matrix: np.ndarray) -> None:
    _write_records(path, np.asarray(matrix, dtype=np.int32), "ivecs")


def load_queries(path: os.PathLike | str, format: str | None = None) -> QuerySet:
    return QuerySet(load_vectors(path, format).vectors)


def save_ground_truth(prefix: os.PathLike | str, gt: GroundTruth) -> tuple[Path, Path]:
    """Write ``<prefix>.ivecs`` (indices) and ``<prefix>.dist.fvecs`` (distances)."""
    prefix = Path(prefix)
    ipath = prefix.with_name(prefix.name + ".ivecs")
    dpath = prefix.with_name(prefix.name + ".dist.fvecs")
    save_ivecs(ipath, gt.indices)
    _write_records(dpath, gt.distances.astype(np.float32), "fvecs")
    return ipath, dpath


def load_ground_truth(prefix: os.PathLike | str, metric: Metric | str = Metric.SQUARED_EUCLIDEAN) -> GroundTruth:
    prefix = Path(prefix)
    idx = load_ivecs(prefix.with_name(prefix.name + ".ivecs")).astype(np.int64)
    dist = _read_records(prefix.with_name(prefix.name + ".dist.fvecs"), "fvecs").astype(np.float64)
    return GroundTruth(idx, dist, Metric.parse(metric))


# --------------------------------------------------------------------------
# ground truth

class ExactScanner:
    """Fast screening of exact distances with a rigorous error band.

    ``approx`` uses matrix products, whose rounding differs from the direct
    formula of ``point_distances``. Its absolute error is far below
    ``tolerance(q)``, so any comparison decided by more than that margin is
    decided correctly; only points inside the band need the direct formula.
    """

    def __init__(self, base: np.ndarray, metric: Metric):
        self.metric = metric
        self.base = np.asarray(base, dtype=np.float64)
        self.norms = np.einsum("ij,ij->i", self.base, self.base)
        self._scale = float(self.norms.max()) if self.norms.size else 0.0

    def approx(self, queries: np.ndarray) -> np.ndarray:
        """Screening distances, one row per query."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dots = q @ self.base.T
        if self.metric is Metric.NEGATED_INNER_PRODUCT:
            return -dots
        return self.norms[None, :] - 2.0 * dots + np.einsum("ij,ij->i", q, q)[:, None]

    def tolerance(self, q: np.ndarray) -> float:
        qn = float(np.dot(q, q))
        return 1e-9 * (self._scale + qn) + 1e-300

    def exact(self, q: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return point_distances(self.metric, np.asarray(q, dtype=np.float64), self.base[rows])

    def topk(self, q: np.ndarray, approx_row: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact (distance, index)-smallest k points, screened by ``approx_row``."""
        n = approx_row.shape[0]
        if k >= n:
            cand = np.arange(n)
        else:
            kth = np.partition(approx_row, k - 1)[k - 1]
            cand = np.flatnonzero(approx_row <= kth + 2.0 * self.tolerance(q))
        return smallest_sorted(self.exact(q, cand), cand, k)


def compute_ground_truth(ds: Dataset, qs: QuerySet, k: int, metric: Metric | str = Metric.SQUARED_EUCLIDEAN,
                         threads: int = 1, block: int = 64) -> GroundTruth:
    """Exact brute-force k-NN for every query, ties broken by smaller index.

    Distances are the double-precision direct formula; a screening pass
    with matrix products only decides which points need it.
    """
    metric = Metric.parse(metric)
    if k < 1 or k > ds.n:
        raise DatasetError(f"k={k} must lie in [1, n={ds.n}]")
    if qs.d != ds.d:
        raise DatasetError(f"dimension mismatch: queries d={qs.d}, dataset d={ds.d}")
    scanner = ExactScanner(ds.vectors, metric)
    out_idx = np.empty((qs.n_q, k), dtype=np.int64)
    out_dist = np.empty((qs.n_q, k), dtype=np.float64)

    def run(rows):
        for lo in range(0, rows.shape[0], block):
            blk = rows[lo:lo + block]
            qb = qs.queries[blk].astype(np.float64)
            approx = scanner.approx(qb)
            for pos, a in enumerate(blk):
                out_idx[a], out_dist[a] = scanner.topk(qb[pos], approx[pos], k)

    chunks = [c for c in np.array_split(np.arange(qs.n_q), max(1, threads)) if c.size]
    if threads <= 1 or len(chunks) == 1:
        for c in chunks:
            run(c)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, chunks))
    return GroundTruth(out_idx, out_dist, metric)


# --------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticSpec:
    n: int = 10_000
    d: int = 32
    n_queries: int = 1_000
    clusters: int = 64
    cluster_std: float = 1.0
    center_scale: float = 3.0
    seed: int = 0


def make_synthetic(spec: SyntheticSpec) -> tuple[Dataset, QuerySet]:
    """Seeded Gaussian-mixture dataset plus queries drawn from the same mixture."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(scale=spec.center_scale, size=(spec.clusters, spec.d))
    # anisotropic per-cluster scales keep the quantizers from being trivially exact
    scales = rng.uniform(0.5, 1.5, size=(spec.clusters, spec.d)) * spec.cluster_std

    def draw(count):
        lab = rng.integers(spec.clusters, size=count)
        return (centers[lab] + rng.normal(size=(count, spec.d)) * scales[lab]).astype(np.float32)

    return Dataset(draw(spec.n)), QuerySet(draw(spec.n_queries))
