from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

DEFAULT_GRAY = 0.5


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with colors, an optional binary object mask and optional saliency.

    Arrays are copied to float64 (mask to uint8) and made read-only, so a
    cloud can be shared freely between threads.
    """

    positions: np.ndarray
    colors: np.ndarray
    gt_mask: Optional[np.ndarray] = None
    saliency: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3) if np.size(self.positions) else None
        if pos is None or pos.shape[0] < 1:
            raise ValueError("PointCloud needs at least one point")
        n = pos.shape[0]
        if not np.all(np.isfinite(pos)):
            raise ValueError("PointCloud positions must be finite")
        col = np.array(self.colors, dtype=np.float64)
        if col.shape != (n, 3):
            raise ValueError(f"colors shape {col.shape} does not match {n} points")
        if not np.all((col >= 0.0) & (col <= 1.0)):
            raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "colors", _frozen(col))
        if self.gt_mask is not None:
            raw = np.asarray(self.gt_mask)
            if raw.shape != (n,):
                raise ValueError(f"gt_mask shape {raw.shape} does not match {n} points")
            if not np.all((raw == 0) | (raw == 1)):
                raise ValueError("gt_mask values must be 0 or 1")
            object.__setattr__(self, "gt_mask", _frozen(raw.astype(np.uint8)))
        if self.saliency is not None:
            sal = np.array(self.saliency, dtype=np.float64)
            if sal.shape != (n,):
                raise ValueError(f"saliency shape {sal.shape} does not match {n} points")
            if not np.all((sal >= 0.0) & (sal <= 1.0)):
                raise ValueError("saliency must lie in [0, 1]")
            object.__setattr__(self, "saliency", _frozen(sal))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def replace(self, **changes) -> "PointCloud":
        return replace(self, **changes)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.positions[idx],
            self.colors[idx],
            None if self.gt_mask is None else self.gt_mask[idx],
            None if self.saliency is None else self.saliency[idx],
        )

    def equals(self, other: "PointCloud") -> bool:
        """Exact equality of every per-point array."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            same(self.positions, other.positions)
            and same(self.colors, other.colors)
            and same(self.gt_mask, other.gt_mask)
            and same(self.saliency, other.saliency)
        )


@dataclass(frozen=True, eq=False)
class InputFeatures:
    """Per-point model input: raw xyz, rgb, then min-max normalized xyz."""

    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


def normalize_xyz(positions: np.ndarray) -> np.ndarray:
    lo = positions.min(axis=0)
    span = positions.max(axis=0) - lo
    out = np.full(positions.shape, 0.5)
    ok = span > 0
    out[:, ok] = (positions[:, ok] - lo[ok]) / span[ok]
    # guard against rounding pushing a coordinate a hair past 1
    np.clip(out, 0.0, 1.0, out=out)
    return out


def build_input_features(cloud: PointCloud, xyz_only: bool = False) -> InputFeatures:
    """9-channel features; ``xyz_only`` zeroes the rgb block."""
    rgb = np.zeros_like(cloud.colors) if xyz_only else cloud.colors
    values = np.hstack([cloud.positions, rgb, normalize_xyz(cloud.positions)])
    return InputFeatures(values)
