"""Segmentation quality metrics on binary volumes with physical spacing.

Conventions, stated once because they matter for comparability:

* Volumes are [D, H, W] stacks of binary masks with anisotropic voxel
  spacing (z, y, x) in millimetres; per-patient metrics are computed on
  the full 3-D stack.
* The surface of a mask is the set of foreground voxels with at least
  one background (or out-of-bounds) face neighbour (6-connectivity),
  scaled to millimetres.
* The Hausdorff distance is the symmetric max over both directed
  nearest-surface distance sets. HD95 pools both directed sets into one
  multiset, discards the floor(0.05 * n) largest values, and returns
  the largest remaining one, i.e. the maximum after the top 5% of
  values is excluded. Whether to pool directions or to percentile each
  direction separately is a genuine convention choice; pooling is used
  here and documented.
* Two empty masks have DSC 1 (perfect agreement). Surface distances
  are undefined when either surface is empty; those return ``None`` and
  callers must report them as warnings instead of numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError


@dataclass(frozen=True)
class BinaryVolume:
    """Binary voxel stack [D, H, W] plus (z, y, x) spacing in mm."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self) -> None:
        if self.voxels.ndim != 3:
            raise ShapeError("rank", f"volume must be [D, H, W], got {self.voxels.shape}")
        vals = np.unique(self.voxels)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"volume values must be 0/1, found {vals[:8]}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing_mm}")


@dataclass(frozen=True)
class SurfaceSet:
    """Boundary voxel coordinates in mm (rows are (z, y, x) points)."""

    points_mm: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points_mm)


def binarize(probability_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities to a uint8 mask; p >= threshold maps to 1."""
    return (probability_map >= threshold).astype(np.uint8)


def dsc(x: BinaryVolume, y: BinaryVolume) -> float:
    """Dice similarity 2|X n Y| / (|X| + |Y|); both-empty counts as 1.0."""
    if x.voxels.shape != y.voxels.shape:
        raise ShapeError("shape", f"volumes differ: {x.voxels.shape} vs {y.voxels.shape}")
    nx = int(x.voxels.sum())
    ny = int(y.voxels.sum())
    if nx + ny == 0:
        return 1.0
    inter = int(np.logical_and(x.voxels, y.voxels).sum())
    return 2.0 * inter / (nx + ny)


def extract_surface(v: BinaryVolume) -> SurfaceSet:
    """Foreground voxels with a background (or out-of-bounds) 6-neighbour."""
    m = v.voxels.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    surface = m & ~interior
    coords = np.argwhere(surface).astype(np.float64)
    return SurfaceSet(coords * np.asarray(v.spacing_mm))


def _directed_distances(src: SurfaceSet, dst: SurfaceSet) -> np.ndarray:
    """Exact Euclidean distance from each src point to its nearest dst point."""
    _, idx = cKDTree(dst.points_mm).query(src.points_mm)
    diff = src.points_mm - dst.points_mm[idx]
    return np.sqrt((diff * diff).sum(axis=1))


def _pooled_distances(sx: SurfaceSet, sy: SurfaceSet) -> np.ndarray | None:
    if sx.n == 0 or sy.n == 0:
        return None
    return np.concatenate([_directed_distances(sx, sy), _directed_distances(sy, sx)])


def hausdorff(sx: SurfaceSet, sy: SurfaceSet) -> float | None:
    """Max of all directed nearest-surface distances, in mm; None if undefined."""
    pooled = _pooled_distances(sx, sy)
    if pooled is None:
        return None
    return float(pooled.max())


def hd95(sx: SurfaceSet, sy: SurfaceSet) -> float | None:
    """Robust Hausdorff: max after dropping the top 5% of pooled distances."""
    pooled = _pooled_distances(sx, sy)
    if pooled is None:
        return None
    return float(robust_max(pooled, drop_fraction=0.05))


def robust_max(values: np.ndarray, drop_fraction: float) -> float:
    """Largest value after discarding the floor(drop_fraction * n) biggest."""
    s = np.sort(values)
    drop = int(np.floor(drop_fraction * len(s)))
    return float(s[len(s) - drop - 1])


def per_slice_dsc(x: BinaryVolume, y: BinaryVolume) -> list[float]:
    """Diagnostic 2-D mode: Dice per axial slice of the two stacks."""
    if x.voxels.shape != y.voxels.shape:
        raise ShapeError("shape", f"volumes differ: {x.voxels.shape} vs {y.voxels.shape}")
    out = []
    for a, b in zip(x.voxels, y.voxels):
        na, nb = int(a.sum()), int(b.sum())
        if na + nb == 0:
            out.append(1.0)
        else:
            out.append(2.0 * int(np.logical_and(a, b).sum()) / (na + nb))
    return out
