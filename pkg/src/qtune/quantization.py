"""VQ / PQ training and the multi-level quantization hierarchy.

A hierarchy is an ordered list of levels, coarsest (lowest bitrate) first.
Every level answers the same question, "how far is datapoint j from q
according to this encoding", but most levels store far fewer than n rows:
a VQ level stores a centroid table and each datapoint inherits the row of
the centroid it was assigned to (possibly through a chain of finer VQ
levels); a PQ level stores codes for the rows of some table (the dataset or
a centroid table). ``row_of_point`` captures that mapping.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qtune.dataset_io import Dataset, ExactScanner, Metric, point_distances


class QuantizationError(ValueError):
    pass


# --------------------------------------------------------------------------
# k-means

def _sq_norms(x):
    return np.einsum("ij,ij->i", x, x)


def _assign(x: np.ndarray, centers: np.ndarray, x_norms: np.ndarray, chunk: int = 8192) -> np.ndarray:
    c_norms = _sq_norms(centers)
    out = np.empty(x.shape[0], dtype=np.int64)
    for lo in range(0, x.shape[0], chunk):
        blk = x[lo:lo + chunk]
        d2 = x_norms[lo:lo + chunk, None] - 2.0 * (blk @ centers.T) + c_norms[None, :]
        out[lo:lo + chunk] = np.argmin(d2, axis=1)
    return out


def _objective(x, centers, assign):
    diff = x - centers[assign]
    return float(np.einsum("ij,ij->i", diff, diff).mean())


def _kmeans_pp(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    first = int(rng.integers(n))
    centers = [x[first]]
    closest = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, c):
        total = closest.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers.append(x[pick])
        np.minimum(closest, ((x - x[pick]) ** 2).sum(axis=1), out=closest)
    return np.array(centers)


def kmeans(data: np.ndarray, c: int, seed: int | np.random.SeedSequence, iters: int):
    """Lloyd's algorithm with k-means++ seeding, in double precision.

    Returns ``(centers, assignments, objective_log)`` where the log holds the
    mean squared reconstruction error after every assignment step.
    """
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    if c < 1:
        raise QuantizationError("centroid count must be positive")
    if c > n:
        raise QuantizationError(f"cannot train {c} centroids on {n} points")
    if iters < 1:
        raise QuantizationError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x_norms = _sq_norms(x)
    centers = _kmeans_pp(x, c, rng)
    assign = _assign(x, centers, x_norms)
    log = [_objective(x, centers, assign)]
    for _ in range(iters):
        # update: per-bucket sums in index order
        order = np.argsort(assign, kind="stable")
        counts = np.bincount(assign, minlength=c)
        nonempty = np.flatnonzero(counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[nonempty]
        sums = np.add.reduceat(x[order], starts, axis=0)
        centers = centers.copy()
        centers[nonempty] = sums / counts[nonempty, None]
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            resid = np.einsum("ij,ij->i", x - centers[assign], x - centers[assign])
            for e in empty:
                far = int(np.argmax(resid))
                centers[e] = x[far]
                resid[far] = -1.0
        new_assign = _assign(x, centers, x_norms)
        log.append(_objective(x, centers, new_assign))
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return centers, assign, log


def buckets_of(assign: np.ndarray, c: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR bucket index: ``members[offsets[r]:offsets[r+1]]`` are the (sorted) points of row r."""
    members = np.argsort(assign, kind="stable")
    offsets = np.zeros(c + 1, dtype=np.int64)
    np.cumsum(np.bincount(assign, minlength=c), out=offsets[1:])
    return offsets, members


@dataclass
class VQCodebook:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_log: list = field(default_factory=list)

    @property
    def c(self) -> int:
        return self.centroids.shape[0]

    def buckets(self) -> tuple[np.ndarray, np.ndarray]:
        return buckets_of(self.assignments, self.c)

    def reconstruction(self) -> np.ndarray:
        return self.centroids[self.assignments]


def train_vq(data: np.ndarray, c: int, seed: int | np.random.SeedSequence = 0, iters: int = 20) -> VQCodebook:
    centers, assign, log = kmeans(data, c, seed, iters)
    return VQCodebook(centers.astype(np.float32), assign, log)


# --------------------------------------------------------------------------
# product quantization

def subspace_widths(d: int, dims_per_block: int) -> list[int]:
    if not 1 <= dims_per_block <= d:
        raise QuantizationError(f"dims_per_block must lie in [1, {d}]")
    k = math.ceil(d / dims_per_block)
    return [dims_per_block] * (k - 1) + [d - dims_per_block * (k - 1)]


@dataclass
class PQCodebook:
    widths: list
    codebooks: list          # K arrays, c_k x l_k float32
    codes: np.ndarray        # rows x K, uint8
    bits: int
    _flat: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.widths)

    @property
    def code_bytes(self) -> int:
        return math.ceil(self.K * self.bits / 8)

    @property
    def bounds(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.widths)])

    def reconstruction(self, rows=None) -> np.ndarray:
        codes = self.codes if rows is None else self.codes[rows]
        return np.concatenate([cb[codes[:, k]] for k, cb in enumerate(self.codebooks)], axis=1)

    def lookup_table(self, metric: Metric, q: np.ndarray) -> np.ndarray:
        """K x 2^bits float32 table of per-subspace partial distances."""
        b = self.bounds
        q = np.asarray(q, dtype=np.float64)
        lut = np.zeros((self.K, 1 << self.bits), dtype=np.float32)
        for k, cb in enumerate(self.codebooks):
            part = point_distances(metric, q[b[k]:b[k + 1]], cb.astype(np.float64))
            lut[k, :part.shape[0]] = part
        return lut

    def flat_codes(self) -> np.ndarray:
        """K x rows codes offset into a raveled lookup table, cached."""
        if self._flat is None:
            offsets = (np.arange(self.K, dtype=np.int32) << self.bits)[:, None]
            self._flat = np.ascontiguousarray(self.codes.T, dtype=np.int32) + offsets
        return self._flat

    def adc(self, lut: np.ndarray, rows=None) -> np.ndarray:
        """Sum of per-subspace table entries, accumulated left to right in float32."""
        flat = self.flat_codes()
        if rows is not None:
            flat = flat[:, rows]
        table = lut.ravel()
        acc = table.take(flat[0])
        for k in range(1, self.K):
            acc += table.take(flat[k])
        return acc


def train_pq(data: np.ndarray, dims_per_block: int, bits: int = 4, seed: int | np.random.SeedSequence = 0,
             iters: int = 10) -> PQCodebook:
    """Independent k-means per subspace with 2^bits centers each."""
    data = np.asarray(data, dtype=np.float64)
    if bits not in (4, 8):
        raise QuantizationError("bits must be 4 or 8")
    centers_per = 1 << bits
    if data.shape[0] < centers_per:
        raise QuantizationError(f"PQ with {bits} bits needs at least {centers_per} training rows, got {data.shape[0]}")
    widths = subspace_widths(data.shape[1], dims_per_block)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # derived without spawn() so the caller's SeedSequence is not mutated
    seeds = [np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (k,)) for k in range(len(widths))]
    codebooks, codes = [], np.empty((data.shape[0], len(widths)), dtype=np.uint8)
    lo = 0
    for k, w in enumerate(widths):
        centers, assign, _ = kmeans(data[:, lo:lo + w], centers_per, seeds[k], iters)
        codebooks.append(centers.astype(np.float32))
        codes[:, k] = assign
        lo += w
    return PQCodebook(widths, codebooks, codes, bits)


# --------------------------------------------------------------------------
# int8 tables

def int8_quantize(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-dimension linear quantization; returns (codes, scales)."""
    peak = np.abs(table).max(axis=0)
    scales = np.where(peak > 0, peak / 127.0, 1.0).astype(np.float32)
    codes = np.clip(np.rint(table / scales), -127, 127).astype(np.int8)
    return codes, scales


# --------------------------------------------------------------------------
# levels and hierarchy

@dataclass
class QuantizationLevel:
    """One encoding of the dataset.

    ``kind`` is ``"vq"`` (datapoint j is represented by its centroid row),
    ``"pq"`` (rows are PQ codes of some table) or ``"exact"``.
    ``row_of_point`` is None when rows are the datapoints themselves.
    """

    kind: str
    source: str
    n: int
    footprint_bytes: int
    row_of_point: np.ndarray | None = None
    table: np.ndarray | None = None          # float32 rows for vq/exact (dequantized for int8)
    pq: PQCodebook | None = None
    store: str = "float32"
    int8_codes: np.ndarray | None = None
    int8_scales: np.ndarray | None = None
    _table64: np.ndarray | None = field(default=None, repr=False)
    _csr: tuple | None = field(default=None, repr=False)
    _scanner: ExactScanner | None = field(default=None, repr=False)

    @property
    def rows(self) -> int:
        if self.pq is not None:
            return self.pq.codes.shape[0]
        return self.table.shape[0]

    @property
    def is_broadcast(self) -> bool:
        return self.row_of_point is not None

    def buckets(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR map from row to its (sorted) datapoints; identity rows for per-point levels."""
        if self._csr is None:
            if self.row_of_point is None:
                self._csr = (np.arange(self.n + 1), np.arange(self.n))
            else:
                self._csr = buckets_of(self.row_of_point, self.rows)
        return self._csr

    def scanner(self, metric: Metric) -> ExactScanner:
        """Screening helper for exact levels (shares the float64 table)."""
        if self.kind != "exact":
            raise QuantizationError("only exact levels have a scanner")
        if self._scanner is None or self._scanner.metric is not metric:
            self._scanner = ExactScanner(self.table, metric)
            self._table64 = self._scanner.base
        return self._scanner

    def compression_ratio(self, dataset_nbytes: int) -> float:
        return self.footprint_bytes / dataset_nbytes

    def scorer(self, metric: Metric, q: np.ndarray) -> "RowScorer":
        return RowScorer(self, metric, q)


class RowScorer:
    """Per-(query, level) distance evaluator over table rows.

    Builds the PQ lookup table once; a row's distance is computed the same
    way whether it is requested alone or alongside the whole table.
    """

    def __init__(self, level: QuantizationLevel, metric: Metric, q: np.ndarray):
        self.level = level
        self.metric = metric
        self.q = np.asarray(q, dtype=np.float64)
        self.lut = level.pq.lookup_table(metric, q) if level.pq is not None else None
        self._full = None

    def rows(self, rows: np.ndarray | None = None) -> np.ndarray:
        lvl = self.level
        if lvl.pq is not None:
            return lvl.pq.adc(self.lut, rows)
        if lvl._table64 is None:
            lvl._table64 = lvl.table.astype(np.float64)
        tab = lvl._table64 if rows is None else lvl._table64[rows]
        return point_distances(self.metric, self.q, tab)

    def full(self) -> np.ndarray:
        if self._full is None:
            self._full = self.rows()
        return self._full

    def points(self, points: np.ndarray) -> np.ndarray:
        lvl = self.level
        if lvl.row_of_point is None:
            return self.full()[points] if self._full is not None else self.rows(points)
        r = lvl.row_of_point[points]
        if self._full is None and r.shape[0] * 4 < lvl.rows:
            uniq, inv = np.unique(r, return_inverse=True)
            return self.rows(uniq)[inv]
        return self.full()[r]

    def all_points(self) -> np.ndarray:
        if self.level.row_of_point is None:
            return self.full()
        return self.full()[self.level.row_of_point]


@dataclass
class LevelSpec:
    kind: str                     # "vq" or "pq"
    centroids: int = 0
    store: str = "float32"
    dims_per_block: int = 0
    bits: int = 4

    def to_json(self) -> dict:
        if self.kind == "vq":
            return {"kind": "vq", "centroids": self.centroids, "store": self.store}
        return {"kind": "pq", "dims_per_block": self.dims_per_block, "bits": self.bits}


@dataclass
class HierarchyConfig:
    """Hierarchy shape, levels listed coarsest first.

    A VQ entry clusters the next finer VQ entry's centroids (or the dataset
    when it is the finest VQ). A PQ entry encodes the table of the next VQ
    entry after it (or the dataset when none follows).
    """

    levels: list
    metric: Metric = Metric.SQUARED_EUCLIDEAN
    keep_exact: bool = True
    seed: int = 0
    vq_iters: int = 20
    pq_iters: int = 10

    @classmethod
    def from_json(cls, obj: dict) -> "HierarchyConfig":
        levels = []
        for item in obj["levels"]:
            kind = item.get("kind")
            if kind == "vq":
                levels.append(LevelSpec("vq", centroids=int(item["centroids"]), store=item.get("store", "float32")))
            elif kind == "pq":
                levels.append(LevelSpec("pq", dims_per_block=int(item["dims_per_block"]), bits=int(item.get("bits", 4))))
            else:
                raise QuantizationError(f"unknown level kind {kind!r}")
        return cls(levels, Metric.parse(obj.get("metric", "squared_euclidean")), bool(obj.get("keep_exact", True)),
                   int(obj.get("seed", 0)), int(obj.get("vq_iters", 20)), int(obj.get("pq_iters", 10)))

    def to_json(self) -> dict:
        return {"metric": self.metric.value, "levels": [s.to_json() for s in self.levels],
                "keep_exact": self.keep_exact, "seed": self.seed,
                "vq_iters": self.vq_iters, "pq_iters": self.pq_iters}


def _plan(config: HierarchyConfig, n: int):
    """Resolve each config entry to the table it encodes; validate sizes."""
    specs = config.levels
    if not specs and not config.keep_exact:
        raise QuantizationError("hierarchy has no levels")
    vq_pos = [i for i, s in enumerate(specs) if s.kind == "vq"]
    counts = [specs[i].centroids for i in vq_pos]
    if any(c < 1 for c in counts):
        raise QuantizationError("VQ centroid counts must be positive")
    if any(a >= b for a, b in zip(counts, counts[1:])):
        raise QuantizationError("VQ centroid counts must strictly increase from coarse to fine")
    if counts and counts[-1] > n:
        raise QuantizationError(f"cannot train {counts[-1]} centroids on {n} points")
    for s in specs:
        if s.kind == "vq" and s.store not in ("float32", "int8"):
            raise QuantizationError(f"unknown centroid store {s.store!r}")
    targets = []
    for i, s in enumerate(specs):
        if s.kind == "vq":
            targets.append(("vq", vq_pos.index(i)))
        else:
            nxt = [j for j in vq_pos if j > i]
            targets.append(("pq", vq_pos.index(nxt[0]) if nxt else None))
    return vq_pos, targets


def _footprints(config: HierarchyConfig, n: int, d: int, bytes_per_dim: int) -> list[int]:
    vq_pos, targets = _plan(config, n)
    out = []
    for s, (_, tgt) in zip(config.levels, targets):
        if s.kind == "vq":
            out.append(s.centroids * d * (1 if s.store == "int8" else 4))
        else:
            rows = n if tgt is None else config.levels[vq_pos[tgt]].centroids
            k = math.ceil(d / s.dims_per_block)
            out.append(rows * math.ceil(k * s.bits / 8))
    if config.keep_exact:
        out.append(n * d * bytes_per_dim)
    return out


def estimate_footprints(config: HierarchyConfig, n: int, d: int, bytes_per_dim: int = 4) -> list[int]:
    """Per-level byte footprints for a config, without training anything."""
    return _footprints(config, n, d, bytes_per_dim)


@dataclass
class QuantizationHierarchy:
    levels: list
    n: int
    d: int
    metric: Metric
    seed: int
    dataset_nbytes: int
    config: HierarchyConfig | None = None

    @property
    def m(self) -> int:
        return len(self.levels)

    @property
    def footprints(self) -> list[int]:
        return [lvl.footprint_bytes for lvl in self.levels]

    def scorers(self, q: np.ndarray) -> list[RowScorer]:
        return [lvl.scorer(self.metric, q) for lvl in self.levels]

    def quantized_distance(self, level: int, q: np.ndarray, j: int) -> float:
        return quantized_distance(self.levels[level], self.metric, q, j)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(_manifest(self), sort_keys=True).encode())
        for _, arr in _level_arrays(self):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def quantized_distance(level: QuantizationLevel, metric: Metric, q: np.ndarray, j: int) -> float:
    """Distance from q to datapoint j according to one quantization level."""
    if not 0 <= j < level.n:
        raise IndexError(f"datapoint index {j} out of range [0, {level.n})")
    return float(level.scorer(metric, q).points(np.array([j]))[0])


def build_hierarchy(ds: Dataset, config: HierarchyConfig, seed: int | None = None) -> QuantizationHierarchy:
    """Train every level of ``config`` on ``ds``; levels come out coarsest first."""
    seed = config.seed if seed is None else seed
    n, d = ds.n, ds.d
    vq_pos, targets = _plan(config, n)
    foot = _footprints(config, n, d, ds.bytes_per_dim)
    if any(a >= b for a, b in zip(foot, foot[1:])):
        raise QuantizationError(f"level footprints must strictly increase, got {foot}")
    seeds = np.random.SeedSequence(seed).spawn(len(config.levels))

    # VQ layers from finest to coarsest; chain[v] maps datapoints to rows of VQ layer v
    vq_books: dict[int, VQCodebook] = {}
    chain: dict[int, np.ndarray] = {}
    src, src_map = ds.vectors, np.arange(n)
    for v in reversed(range(len(vq_pos))):
        spec = config.levels[vq_pos[v]]
        book = train_vq(src, spec.centroids, seeds[vq_pos[v]], config.vq_iters)
        vq_books[v] = book
        chain[v] = book.assignments[src_map]
        src, src_map = book.centroids, chain[v]

    levels = []
    for i, (spec, (kind, tgt)) in enumerate(zip(config.levels, targets)):
        if kind == "vq":
            book = vq_books[tgt]
            lvl = QuantizationLevel("vq", f"vq{tgt}", n, foot[i], row_of_point=chain[tgt], store=spec.store)
            if spec.store == "int8":
                lvl.int8_codes, lvl.int8_scales = int8_quantize(book.centroids)
                lvl.table = lvl.int8_codes.astype(np.float32) * lvl.int8_scales
            else:
                lvl.table = book.centroids
        else:
            table = ds.vectors if tgt is None else vq_books[tgt].centroids
            pq = train_pq(table, spec.dims_per_block, spec.bits, seeds[i], config.pq_iters)
            lvl = QuantizationLevel("pq", "dataset" if tgt is None else f"vq{tgt}", n, foot[i],
                                    row_of_point=None if tgt is None else chain[tgt], pq=pq)
        levels.append(lvl)
    if config.keep_exact:
        levels.append(QuantizationLevel("exact", "dataset", n, foot[-1], table=ds.vectors))
    return QuantizationHierarchy(levels, n, d, config.metric, seed, ds.nbytes, config)


# --------------------------------------------------------------------------
# presets

def preset(name: str, n: int, d: int, metric: Metric | str = Metric.SQUARED_EUCLIDEAN, seed: int = 0) -> HierarchyConfig:
    """Named hierarchy shapes, scaled to a dataset of n points in d dimensions.

    ``deep1b``, ``shallow_small`` and ``shallow_large`` reproduce the
    billion-scale layouts (two VQ tiers of n/250 and n/25000 centroids, int8
    centroid tables, 4-bit PQ at 4/3/1 dims per block, no stored dataset).
    ``ivf_pq`` and ``desk_*`` are small-scale shapes with exact reranking.
    """
    metric = Metric.parse(metric)
    fine = max(1, n // 250)
    coarse = max(1, fine // 100)
    desk_fine = max(2, n // 50)
    desk_coarse = max(1, n // 1000)
    pq_dpb = 2 if d >= 2 else 1
    shapes = {
        "deep1b": ([LevelSpec("pq", dims_per_block=4), LevelSpec("vq", centroids=coarse, store="int8"),
                    LevelSpec("pq", dims_per_block=3), LevelSpec("vq", centroids=fine, store="int8"),
                    LevelSpec("pq", dims_per_block=1)], False),
        "shallow_small": ([LevelSpec("pq", dims_per_block=4), LevelSpec("vq", centroids=coarse, store="int8"),
                           LevelSpec("pq", dims_per_block=1)], False),
        "shallow_large": ([LevelSpec("pq", dims_per_block=3), LevelSpec("vq", centroids=fine, store="int8"),
                           LevelSpec("pq", dims_per_block=1)], False),
        "ivf_pq": ([LevelSpec("vq", centroids=max(1, n // 100)), LevelSpec("pq", dims_per_block=pq_dpb)], True),
        "desk_deep": ([LevelSpec("vq", centroids=desk_coarse), LevelSpec("vq", centroids=desk_fine),
                       LevelSpec("pq", dims_per_block=pq_dpb)], True),
        "desk_shallow_small": ([LevelSpec("vq", centroids=desk_coarse), LevelSpec("pq", dims_per_block=pq_dpb)], True),
        "desk_shallow_large": ([LevelSpec("vq", centroids=desk_fine), LevelSpec("pq", dims_per_block=pq_dpb)], True),
    }
    if name not in shapes:
        raise QuantizationError(f"unknown preset {name!r}; known: {sorted(shapes)}")
    levels, keep_exact = shapes[name]
    return HierarchyConfig(levels, metric, keep_exact, seed)


# --------------------------------------------------------------------------
# persistence

def _manifest(h: QuantizationHierarchy) -> dict:
    levels = []
    for lvl in h.levels:
        item = {"kind": lvl.kind, "source": lvl.source, "footprint_bytes": lvl.footprint_bytes,
                "rows": lvl.rows, "store": lvl.store, "broadcast": lvl.is_broadcast}
        if lvl.pq is not None:
            item.update(widths=list(lvl.pq.widths), bits=lvl.pq.bits)
        levels.append(item)
    return {"format": "qtune-hierarchy/1", "n": h.n, "d": h.d, "metric": h.metric.value, "seed": h.seed,
            "dataset_nbytes": h.dataset_nbytes, "levels": levels,
            "config": h.config.to_json() if h.config is not None else None}


def _level_arrays(h: QuantizationHierarchy):
    for i, lvl in enumerate(h.levels):
        if lvl.row_of_point is not None:
            yield f"level{i}.row_of_point.i64", lvl.row_of_point.astype("<i8")
        if lvl.pq is not None:
            yield f"level{i}.codes.u8", lvl.pq.codes
            for k, cb in enumerate(lvl.pq.codebooks):
                yield f"level{i}.codebook{k}.f32", cb.astype("<f4")
        elif lvl.int8_codes is not None:
            yield f"level{i}.table.i8", lvl.int8_codes
            yield f"level{i}.scales.f32", lvl.int8_scales.astype("<f4")
        else:
            yield f"level{i}.table.f32", lvl.table.astype("<f4")


_SUFFIX_DTYPES = {"i64": "<i8", "u8": "u1", "f32": "<f4", "i8": "i1"}


def save_hierarchy(h: QuantizationHierarchy, directory: os.PathLike | str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in _level_arrays(h):
        (directory / name).write_bytes(np.ascontiguousarray(arr).tobytes())
    manifest = _manifest(h)
    manifest["digest"] = h.digest()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_hierarchy(directory: os.PathLike | str) -> QuantizationHierarchy:
    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text())
    n, d = man["n"], man["d"]

    def arr(name, shape):
        dtype = np.dtype(_SUFFIX_DTYPES[name.rsplit(".", 1)[1]])
        return np.frombuffer((directory / name).read_bytes(), dtype=dtype).reshape(shape).copy()

    levels = []
    for i, item in enumerate(man["levels"]):
        rop = arr(f"level{i}.row_of_point.i64", (n,)).astype(np.int64) if item["broadcast"] else None
        lvl = QuantizationLevel(item["kind"], item["source"], n, item["footprint_bytes"], row_of_point=rop,
                                store=item["store"])
        rows = item["rows"]
        if item["kind"] == "pq":
            widths, bits = item["widths"], item["bits"]
            codes = arr(f"level{i}.codes.u8", (rows, len(widths)))
            books = [arr(f"level{i}.codebook{k}.f32", (-1, w)).astype(np.float32) for k, w in enumerate(widths)]
            lvl.pq = PQCodebook(list(widths), books, codes, bits)
        elif item["store"] == "int8":
            lvl.int8_codes = arr(f"level{i}.table.i8", (rows, d))
            lvl.int8_scales = arr(f"level{i}.scales.f32", (d,)).astype(np.float32)
            lvl.table = lvl.int8_codes.astype(np.float32) * lvl.int8_scales
        else:
            lvl.table = arr(f"level{i}.table.f32", (rows, d)).astype(np.float32)
        levels.append(lvl)
    cfg = HierarchyConfig.from_json(man["config"]) if man.get("config") else None
    h = QuantizationHierarchy(levels, n, d, Metric.parse(man["metric"]), man["seed"], man["dataset_nbytes"], cfg)
    if man.get("digest") and h.digest() != man["digest"]:
        raise QuantizationError("hierarchy digest mismatch; files are corrupt or were edited")
    return h
