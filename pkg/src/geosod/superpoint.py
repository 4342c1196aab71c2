"""Greedy superpoint partition and the pooling / inverse-mapping pair.

The partition grows one superpoint per randomly chosen centre: its ``k``
nearest still-unclustered points are visited in distance order and absorbed
while their feature distance to the centre stays within ``gamma``; the first
miss ends the superpoint. Centre features are never updated, and rejected
points stay unclustered for later rounds.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .spatial import NeighborIndex

DEFAULT_K = 32
DEFAULT_GAMMA_PERCENTILE = 10.0
GAMMA_SAMPLE_PAIRS = 4096


@dataclass(frozen=True, eq=False)
class SuperpointPartition:
    sp_id_of_point: np.ndarray
    center_of_sp: np.ndarray

    @property
    def n_points(self) -> int:
        return self.sp_id_of_point.shape[0]

    @property
    def m(self) -> int:
        return self.center_of_sp.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.sp_id_of_point, minlength=self.m)

    @property
    def members_of_sp(self) -> list[np.ndarray]:
        order = np.argsort(self.sp_id_of_point, kind="stable")
        return np.split(order, np.cumsum(self.sizes)[:-1])

    @classmethod
    def from_ids(cls, sp_ids, centers=None) -> "SuperpointPartition":
        """Build from per-point ids; missing centres default to each group's first member."""
        ids = np.asarray(sp_ids, dtype=np.intp)
        m = int(ids.max()) + 1
        if centers is None:
            first = np.full(m, -1, dtype=np.intp)
            for j in range(ids.shape[0] - 1, -1, -1):
                first[ids[j]] = j
            centers = first
        centers = np.asarray(centers, dtype=np.intp)
        if np.any(np.bincount(ids, minlength=m) == 0):
            raise ValueError("every superpoint must be non-empty")
        return cls(ids, centers)


class TableCache:
    """Neighbour tables keyed by caller-chosen ids (point sets fixed per sample)."""

    def __init__(self):
        self._store: dict = {}

    def get(self, key, positions: np.ndarray, width: int):
        hit = self._store.get(key)
        if hit is None or hit[0] != width:
            table, trusted = NeighborIndex(positions).neighbor_table(width)
            hit = (width, table.astype(np.int32), trusted.astype(np.int32))
            self._store[key] = hit
        return hit[1], hit[2]


@numba.njit(cache=True)
def _nearest_unclustered_brute(pos, sp, i, want, out):
    n = pos.shape[0]
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    c = 0
    for j in range(n):
        if sp[j] == -1 and j != i:
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            idx[c] = j
            d2[c] = dx * dx + dy * dy + dz * dz
            c += 1
    # keep everything up to the want-th smallest distance (ties included)
    cut = np.partition(d2[:c], want - 1)[want - 1]
    keep = 0
    for r in range(c):
        if d2[r] <= cut:
            idx[keep] = idx[r]
            d2[keep] = d2[r]
            keep += 1
    # stable sort keeps ascending index order among equal distances
    order = np.argsort(d2[:keep], kind="mergesort")
    for r in range(want):
        out[r] = idx[order[r]]
    return want


@numba.njit(cache=True)
def _greedy_partition(pos, feat, table, trusted, perm, k, gamma):
    n = pos.shape[0]
    c_dim = feat.shape[1]
    sp = np.full(n, -1, dtype=np.int64)
    centers = np.empty(n, dtype=np.int64)
    queue = np.empty(max(k, 1), dtype=np.int64)
    m = 0
    remaining = n
    p = 0
    while remaining > 0:
        while sp[perm[p]] != -1:
            p += 1
        i = perm[p]
        sp[i] = m
        centers[m] = i
        remaining -= 1
        want = min(k, remaining)
        got = 0
        if want > 0:
            for r in range(trusted[i]):
                j = table[i, r]
                if sp[j] == -1:
                    queue[got] = j
                    got += 1
                    if got == want:
                        break
            if got < want:
                got = _nearest_unclustered_brute(pos, sp, i, want, queue)
        for r in range(got):
            j = queue[r]
            s = 0.0
            for c in range(c_dim):
                d = feat[i, c] - feat[j, c]
                s += d * d
            if np.sqrt(s) <= gamma:
                sp[j] = m
                remaining -= 1
            else:
                break
        m += 1
    return sp, centers[:m]


def adaptive_gamma(features: np.ndarray, seed: int, percentile: float = DEFAULT_GAMMA_PERCENTILE,
                   pairs: int = GAMMA_SAMPLE_PAIRS) -> float:
    """Percentile of feature distances over randomly sampled point pairs."""
    n = features.shape[0]
    if n < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    a = rng.integers(n, size=pairs)
    b = (a + rng.integers(1, n, size=pairs)) % n
    d = np.linalg.norm(features[a] - features[b], axis=1)
    return float(np.percentile(d, percentile))


def partition(
    positions: np.ndarray,
    features: np.ndarray,
    k: int = DEFAULT_K,
    gamma: Optional[float] = None,
    seed: int = 0,
    table: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> SuperpointPartition:
    """Cluster points into superpoints.

    ``gamma=None`` picks the 10th percentile of sampled pairwise feature
    distances. ``table`` may supply a precomputed ``neighbor_table(k')`` for
    the same positions with ``k' >= k``; it only speeds up the queue search.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    features = np.ascontiguousarray(features, dtype=np.float64)
    n = positions.shape[0]
    if n < 1:
        raise ValueError("partition needs at least one point")
    if features.ndim != 2 or features.shape[0] != n:
        raise ValueError(f"partition: features shape {features.shape} does not match {n} points")
    if k < 1:
        raise ValueError(f"partition: k must be >= 1, got {k}")
    if gamma is None:
        gamma = adaptive_gamma(features, seed)
    if gamma < 0:
        raise ValueError(f"partition: gamma must be >= 0, got {gamma}")
    if table is None:
        tab, trusted = NeighborIndex(positions).neighbor_table(min(2 * k, max(n - 1, 1)))
    else:
        tab, trusted = table
    perm = np.random.default_rng(seed).permutation(n)
    sp, centers = _greedy_partition(positions, features, np.ascontiguousarray(tab), np.ascontiguousarray(trusted),
                                    perm, int(k), float(gamma))
    return SuperpointPartition(sp.astype(np.intp), centers.astype(np.intp))


def superpoint_pool(features: np.ndarray, part: SuperpointPartition) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != part.n_points:
        raise ValueError(f"superpoint_pool: {features.shape[0]} rows for {part.n_points} points")
    sizes = part.sizes.astype(np.float64)
    sums = np.stack([np.bincount(part.sp_id_of_point, weights=features[:, c], minlength=part.m)
                     for c in range(features.shape[1])], axis=1)
    return sums / sizes[:, None]


def inverse_map(sp_values: np.ndarray, part: SuperpointPartition) -> np.ndarray:
    sp_values = np.asarray(sp_values)
    if sp_values.shape[0] != part.m:
        raise ValueError(f"inverse_map: {sp_values.shape[0]} rows for {part.m} superpoints")
    return sp_values[part.sp_id_of_point]


def random_colors(m: int, seed: int) -> np.ndarray:
    """``m`` distinct 8-bit colors, returned in [0, 1]."""
    if m > 2**24:
        raise ValueError("too many superpoints for distinct 24-bit colors")
    rng = np.random.default_rng(seed)
    codes = rng.choice(2**24, size=m, replace=False)
    rgb = np.stack([(codes >> 16) & 255, (codes >> 8) & 255, codes & 255], axis=1)
    return rgb.astype(np.float64) / 255.0
