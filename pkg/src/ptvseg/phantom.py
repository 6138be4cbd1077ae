"""Deterministic synthetic CT phantom with analytically known targets.

Each phantom patient is a stack of axial slices cut from a few 3-D
ellipsoids: a soft-tissue body (about 40 HU), two to five bright bone
blobs (about 700 HU, saturating the display window), and one organ blob
(about 80 HU). The ground-truth target is the union of the bone blobs
dilated by a small margin and the organ blob dilated by a larger one,
mirroring how a clinical target volume grows into a planning target
volume by isotropic expansion. Shapes are ellipsoids on purpose: their
analytic cross-sections make the rasterization and the dilation
independently checkable.

Everything is a pure function of (seed, patient index): generating the
same patient twice yields byte-identical records, so whole pipelines
can be regression-tested end to end. Realism is a non-goal; thin
structures such as lymph-node chains are not modelled.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataprep import PatientRecord, save_dataset
from .errors import ConfigError

EPOCH_DATE = dt.date(1970, 1, 1)

BODY_HU = 40.0
BONE_HU = 700.0
ORGAN_HU = 80.0
AIR_HU = -1000.0
NOISE_STD_HU = 8.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_patients: int = 10
    slices_min: int = 6
    slices_max: int = 10
    size: int = 64  # slices are size x size; up to 512 works, 64 is test scale
    spacing_mm: tuple[float, float, float] = (5.0, 1.2, 1.2)  # (z, y, x)
    bone_margin_mm: float = 2.0
    organ_margin_mm: float = 5.0

    def __post_init__(self) -> None:
        if self.size % 16 != 0:
            raise ConfigError(f"slice size must be divisible by 16, got {self.size}")
        if self.bone_margin_mm < 0 or self.organ_margin_mm < 0:
            raise ConfigError("margins must be >= 0")
        if not 1 <= self.slices_min <= self.slices_max:
            raise ConfigError(
                f"invalid slice range [{self.slices_min}, {self.slices_max}]"
            )
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be >= 1, got {self.n_patients}")


def dilate_mask(
    mask: np.ndarray, radius_mm: float, spacing_mm: tuple[float, float]
) -> np.ndarray:
    """In-plane morphological dilation by a Euclidean ball of physical radius.

    A pixel joins the dilated mask iff its center lies within
    ``radius_mm`` of some foreground pixel center. Applied per slice
    (2-D) when given a 3-D stack, matching slice-wise margin expansion.
    """
    if mask.ndim == 3:
        return np.stack([dilate_mask(sl, radius_mm, spacing_mm) for sl in mask])
    if radius_mm == 0.0 or not mask.any():
        return np.array(mask, dtype=np.uint8)
    sy, sx = spacing_mm
    ky = int(np.floor(radius_mm / sy))
    kx = int(np.floor(radius_mm / sx))
    dy = np.arange(-ky, ky + 1)[:, None] * sy
    dx = np.arange(-kx, kx + 1)[None, :] * sx
    ball = dy * dy + dx * dx <= radius_mm * radius_mm
    return ndimage.binary_dilation(mask.astype(bool), structure=ball).astype(np.uint8)


def _ellipsoid_slice_mask(
    center: np.ndarray, semi: np.ndarray, z_mm: float, grid_y: np.ndarray, grid_x: np.ndarray
) -> np.ndarray:
    """Cross-section of an ellipsoid at height z, on the pixel-center grid."""
    rel = (z_mm - center[0]) / semi[0]
    if abs(rel) >= 1.0:
        return np.zeros((len(grid_y), len(grid_x)), dtype=bool)
    f = np.sqrt(1.0 - rel * rel)
    ey = (grid_y[:, None] - center[1]) / (semi[1] * f)
    ex = (grid_x[None, :] - center[2]) / (semi[2] * f)
    return ey * ey + ex * ex <= 1.0


def generate_patient(spec: PhantomSpec, index: int) -> PatientRecord:
    """Build phantom patient ``index``; fully determined by (spec.seed, index)."""
    if not 0 <= index < spec.n_patients:
        raise ConfigError(f"patient index {index} outside [0, {spec.n_patients})")
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    sz, sy, sx = spec.spacing_mm
    n_slices = int(rng.integers(spec.slices_min, spec.slices_max + 1))
    height_mm = n_slices * sz
    extent_y = spec.size * sy
    extent_x = spec.size * sx
    grid_y = (np.arange(spec.size) + 0.5) * sy
    grid_x = (np.arange(spec.size) + 0.5) * sx

    def rnd(lo: float, hi: float) -> float:
        return float(rng.uniform(lo, hi))

    body_c = np.array([height_mm / 2, extent_y / 2 + rnd(-0.03, 0.03) * extent_y,
                       extent_x / 2 + rnd(-0.03, 0.03) * extent_x])
    body_s = np.array([height_mm * rnd(0.8, 1.2), extent_y * rnd(0.36, 0.44),
                       extent_x * rnd(0.36, 0.44)])

    def blob_inside_body(frac_lo: float, frac_hi: float) -> tuple[np.ndarray, np.ndarray]:
        c = np.array([
            rnd(0.2, 0.8) * height_mm,
            body_c[1] + rnd(-0.45, 0.45) * body_s[1],
            body_c[2] + rnd(-0.45, 0.45) * body_s[2],
        ])
        s = np.array([
            rnd(0.5, 1.0) * height_mm,
            rnd(frac_lo, frac_hi) * extent_y,
            rnd(frac_lo, frac_hi) * extent_x,
        ])
        return c, s

    n_bones = int(rng.integers(2, 6))
    bones = [blob_inside_body(0.06, 0.12) for _ in range(n_bones)]
    organ = blob_inside_body(0.12, 0.20)

    hu = np.empty((n_slices, spec.size, spec.size), dtype=np.int16)
    target = np.zeros((n_slices, spec.size, spec.size), dtype=np.uint8)
    for i in range(n_slices):
        z = (i + 0.5) * sz
        body = _ellipsoid_slice_mask(body_c, body_s, z, grid_y, grid_x)
        bone = np.zeros_like(body)
        for c, s in bones:
            bone |= _ellipsoid_slice_mask(c, s, z, grid_y, grid_x)
        org = _ellipsoid_slice_mask(organ[0], organ[1], z, grid_y, grid_x)
        bone &= body
        org &= body

        sl = np.full((spec.size, spec.size), AIR_HU)
        noise = rng.normal(0.0, NOISE_STD_HU, size=sl.shape)
        sl[body] = BODY_HU + noise[body]
        sl[org] = ORGAN_HU + noise[org]
        sl[bone] = BONE_HU + noise[bone]
        hu[i] = np.clip(np.rint(sl), -1024, 3071).astype(np.int16)

        dil_bone = dilate_mask(bone.astype(np.uint8), spec.bone_margin_mm, (sy, sx))
        dil_org = dilate_mask(org.astype(np.uint8), spec.organ_margin_mm, (sy, sx))
        target[i] = dil_bone | dil_org

    date = (EPOCH_DATE + dt.timedelta(days=index)).isoformat()
    return PatientRecord(
        patient_id=f"p{index:03d}",
        acquisition_date=date,
        hu=hu,
        mask=target,
        spacing_mm=spec.spacing_mm,
        z_positions_mm=[(i + 0.5) * sz for i in range(n_slices)],
    )


def generate_dataset(spec: PhantomSpec) -> list[PatientRecord]:
    return [generate_patient(spec, i) for i in range(spec.n_patients)]


def write_dataset(spec: PhantomSpec, out_dir: str) -> str:
    """Generate all patients and write them in the dataset format."""
    return save_dataset(generate_dataset(spec), out_dir)
