"""Top-k selection under the (distance, index) lexicographic order.

Every ranking in the package (ground truth, candidate narrowing, loss
statistics) goes through these helpers so that ties are broken the same
way everywhere: smaller distance first, then smaller datapoint index.
"""

from __future__ import annotations

import numpy as np


def select_positions(dist: np.ndarray, idx: np.ndarray, t: int) -> np.ndarray:
    """Positions of the ``t`` smallest ``(dist, idx)`` keys, in no particular order.

    ``dist`` and ``idx`` are parallel 1-D arrays; ``idx`` values are unique.
    """
    size = dist.shape[0]
    if t >= size:
        return np.arange(size)
    if t <= 0:
        return np.arange(0)
    kth = np.partition(dist, t - 1)[t - 1]
    less = np.flatnonzero(dist < kth)
    tied = np.flatnonzero(dist == kth)
    need = t - less.shape[0]
    if need < tied.shape[0]:
        tied = tied[np.argsort(idx[tied], kind="stable")[:need]]
    return np.concatenate([less, tied])


def select_smallest(dist: np.ndarray, idx: np.ndarray, t: int) -> np.ndarray:
    """Members of ``idx`` holding the ``t`` smallest keys (unordered)."""
    return idx[select_positions(dist, idx, t)]


def lex_order(dist: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Permutation sorting ``(dist, idx)`` ascending."""
    return np.lexsort((idx, dist))


def smallest_sorted(dist: np.ndarray, idx: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``t`` smallest members of ``idx`` and their distances, sorted by ``(dist, idx)``."""
    pos = select_positions(dist, idx, t)
    pos = pos[lex_order(dist[pos], idx[pos])]
    return idx[pos], dist[pos]
