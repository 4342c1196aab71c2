"""Voxel reduction, exact k-nearest-neighbour queries, farthest point sampling
and local-area construction for the class-agnostic loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pcio import PointCloud

DEFAULT_VOXEL_SHAPE = (150, 100, 75)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    shape: tuple[int, int, int]
    origin: np.ndarray
    cell_size: np.ndarray
    voxel_of_point: np.ndarray
    # row of each voxel in the reduced cloud
    representative_of_voxel: np.ndarray
    # members of voxel v are order[offsets[v]:offsets[v + 1]]
    order: np.ndarray
    offsets: np.ndarray

    @property
    def n_voxels(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_points(self) -> int:
        return self.voxel_of_point.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def point_rows_of_voxel(self) -> list[np.ndarray]:
        return np.split(self.order, self.offsets[1:-1])


def _group_means(values: np.ndarray, ids: np.ndarray, counts: np.ndarray) -> np.ndarray:
    cols = [np.bincount(ids, weights=values[:, c], minlength=counts.shape[0]) for c in range(values.shape[1])]
    return np.stack(cols, axis=1) / counts[:, None]


def voxelize(cloud: PointCloud, shape=DEFAULT_VOXEL_SHAPE) -> tuple[VoxelGrid, PointCloud]:
    """Bin the bounding box into at most ``shape`` cubic cells and keep one mean
    point per occupied cell.

    The cell edge is the smallest one that fits the box inside ``shape`` cells on
    every axis, so a flat box uses fewer cells along its thin axis. The reduced
    mask is a majority vote with ties going to the object.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"voxel shape must be 3 positive integers, got {shape}")
    pos = cloud.positions
    origin = pos.min(axis=0)
    extent = pos.max(axis=0) - origin
    dims = np.array(shape)
    edge = float((extent / dims).max())
    cell = np.full(3, edge if edge > 0 else 1.0)
    coords = np.floor((pos - origin) / cell).astype(np.int64)
    np.clip(coords, 0, dims - 1, out=coords)
    linear = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
    _, inverse = np.unique(linear, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    order = np.argsort(inverse, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    grid = VoxelGrid(shape, origin, cell, inverse, np.arange(counts.shape[0]), order, offsets)

    fcounts = counts.astype(np.float64)
    rpos = _group_means(pos, inverse, fcounts)
    rcol = np.clip(_group_means(cloud.colors, inverse, fcounts), 0.0, 1.0)
    rmask = None
    if cloud.gt_mask is not None:
        frac = np.bincount(inverse, weights=cloud.gt_mask.astype(np.float64)) / fcounts
        rmask = (frac >= 0.5).astype(np.uint8)
    rsal = None
    if cloud.saliency is not None:
        rsal = np.clip(np.bincount(inverse, weights=cloud.saliency) / fcounts, 0.0, 1.0)
    return grid, PointCloud(rpos, rcol, rmask, rsal)


def devoxelize(grid: VoxelGrid, voxel_values: np.ndarray) -> np.ndarray:
    """Give every original point the row of its voxel."""
    voxel_values = np.asarray(voxel_values)
    if voxel_values.shape[0] != grid.n_voxels:
        raise ValueError(f"devoxelize: {voxel_values.shape[0]} rows for {grid.n_voxels} voxels")
    return voxel_values[grid.voxel_of_point]


def sq_dists(positions: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = positions - q
    return (diff * diff).sum(axis=-1)


class NeighborIndex:
    """Exact kNN over a fixed point set.

    Ordering is by squared Euclidean distance, then by index. A k-d tree
    proposes candidates; every candidate tied with the k-th distance is
    gathered by a ball query before the final sort, so the answer is exactly
    the brute-force one.
    """

    def __init__(self, positions: np.ndarray):
        self.positions = np.asarray(positions, dtype=np.float64)
        self.tree = cKDTree(self.positions)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def query(self, point: np.ndarray, k: int, exclude: int | None = None) -> np.ndarray:
        extra = 0 if exclude is None else 1
        kk = min(k + extra, self.n)
        d, _ = self.tree.query(point, k=kk)
        radius = float(np.max(d))
        cand = np.asarray(self.tree.query_ball_point(point, radius * (1 + 1e-9) + 1e-300), dtype=np.intp)
        if exclude is not None:
            cand = cand[cand != exclude]
        d2 = sq_dists(self.positions[cand], point)
        sel = np.lexsort((cand, d2))[:k]
        return cand[sel]

    def knn(self, query: int, k: int) -> np.ndarray:
        return self.query(self.positions[query], k, exclude=query)

    def neighbor_table(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Up to ``k`` ordered neighbours of every point, excluding itself.

        Returns ``(table, trusted)``: row ``i`` lists neighbours in exact
        (distance, index) order for its first ``trusted[i]`` entries; later
        entries may be missing tied points and must not be relied on.
        """
        n = self.n
        kk = min(k + 1, n)
        _, idx = self.tree.query(self.positions, k=kk)
        idx = np.asarray(idx, dtype=np.intp).reshape(n, kk)
        d2 = sq_dists(self.positions[idx], self.positions[:, None, :])
        # the tree already sorts by its own distances; re-sort only rows that
        # disagree with the exact (distance, index) order
        step = np.diff(d2, axis=1)
        bad = np.flatnonzero(((step < 0) | ((step == 0) & (np.diff(idx, axis=1) < 0))).any(axis=1))
        if bad.size:
            order = np.lexsort((idx[bad], d2[bad]), axis=-1)
            idx[bad] = np.take_along_axis(idx[bad], order, axis=1)
            d2[bad] = np.take_along_axis(d2[bad], order, axis=1)
        is_self = idx == np.arange(n)[:, None]
        # drop self; rows without self (exact duplicates) drop their last entry
        keep = ~is_self
        no_self = keep.all(axis=1)
        keep[no_self, -1] = False
        table = idx[keep].reshape(n, kk - 1)
        tab_d2 = d2[keep].reshape(n, kk - 1)
        if kk - 1 >= n - 1:
            trusted = np.full(n, kk - 1, dtype=np.intp)
        else:
            dmax = d2[:, -1:]
            trusted = (tab_d2 < dmax * (1 - 1e-9)).sum(axis=1)
        return table, trusted.astype(np.intp)


def knn(positions: np.ndarray, query: int, k: int) -> np.ndarray:
    """The ``k`` nearest points to ``positions[query]``, excluding itself."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"knn: k must lie in [1, {n - 1}], got {k}")
    if not 0 <= query < n:
        raise ValueError(f"knn: query {query} out of range")
    return NeighborIndex(positions).knn(query, k)


def knn_brute_force(positions: np.ndarray, query: int, k: int) -> np.ndarray:
    d2 = sq_dists(positions, positions[query])
    idx = np.arange(positions.shape[0])
    keep = idx != query
    order = np.lexsort((idx[keep], d2[keep]))
    return idx[keep][order[:k]]


def farthest_point_sample(positions: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Greedy max-min sampling from a seeded random start; ties go to the lower index."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"farthest_point_sample: count must lie in [1, {n}], got {count}")
    start = int(np.random.default_rng(seed).integers(n))
    return _fps_from(positions, count, start)


def _fps_from(positions: np.ndarray, count: int, start: int) -> np.ndarray:
    picked = np.empty(count, dtype=np.intp)
    picked[0] = start
    mind = sq_dists(positions, positions[start])
    for i in range(1, count):
        nxt = int(np.argmax(mind))
        picked[i] = nxt
        np.minimum(mind, sq_dists(positions, positions[nxt]), out=mind)
    return picked


@dataclass(frozen=True, eq=False)
class LocalAreaSet:
    areas: list[np.ndarray]
    background: np.ndarray

    @property
    def z(self) -> int:
        return len(self.areas)


def generate_local_areas(cloud: PointCloud, area_count: int = 16, area_size: int = 32, seed: int = 0) -> LocalAreaSet:
    """Object patches around farthest-point seeds; each patch is the seed's
    ``area_size`` nearest object points, seed included. Patches may overlap."""
    if cloud.gt_mask is None:
        raise ValueError("generate_local_areas needs a ground-truth mask")
    obj = np.flatnonzero(cloud.gt_mask == 1)
    if obj.size == 0:
        raise ValueError("generate_local_areas: the object mask is empty")
    if area_count < 1 or area_size < 1:
        raise ValueError("area_count and area_size must be >= 1")
    opos = cloud.positions[obj]
    seeds = farthest_point_sample(opos, min(area_count, obj.size), seed)
    size = min(area_size, obj.size)
    index = NeighborIndex(opos) if size > 1 else None
    areas = []
    for s in seeds:
        if index is None:
            local = np.array([s], dtype=np.intp)
        else:
            local = np.concatenate([[s], index.knn(int(s), size - 1)])
        areas.append(obj[local])
    background = np.flatnonzero(cloud.gt_mask == 0)
    return LocalAreaSet(areas, background)
