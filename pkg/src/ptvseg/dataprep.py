"""CT preprocessing and the on-disk dataset format.

Windowing: Hounsfield values are clamped to the [-160, 240] window and
mapped linearly onto 0..255 with round-half-up, so each slice becomes
an 8-bit image; the network consumes these bytes divided by 255. The
8-bit quantization is kept on purpose rather than refined away.

Dataset format (version 1, bit-exact, no compression):

* manifest.json - one JSON document::

      {"patients": [{"id": ..., "acquisition_date": "YYYY-MM-DD",
                     "spacing_mm": [z, y, x], "slice_shape": [H, W],
                     "slices": [{"image": path, "mask": path,
                                 "z_mm": float}, ...]}, ...]}

  Paths are relative to the manifest's directory.
* image files - raw little-endian signed 16-bit HU values, row-major,
  dimensions given by the patient's ``slice_shape``.
* mask files - raw 8-bit values in {0, 1}, row-major, same dimensions.

Real DICOM / DICOM-RT decoding is out of scope; an upstream converter
is expected to emit this format (contours can be rasterized with
:func:`rasterize_contour`).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError

log = logging.getLogger(__name__)

HU_MIN, HU_MAX = -1024, 3071
WINDOW_LO, WINDOW_HI = -160, 240
CLINICAL_SLICE_RANGE = (164, 534)  # out-of-range stacks are warned about, not rejected

MANIFEST_NAME = "manifest.json"


def window_hu(hu: int) -> int:
    """Map one HU value through the [-160, 240] window onto 0..255.

    Clamps to the window, then rounds half-up:
    round((hu + 160) * 255 / 400).
    """
    clamped = min(max(int(hu), WINDOW_LO), WINDOW_HI)
    scaled = (clamped - WINDOW_LO) * 255.0 / (WINDOW_HI - WINDOW_LO)
    return int(np.floor(scaled + 0.5))


def _build_lut() -> np.ndarray:
    return np.array([window_hu(hu) for hu in range(HU_MIN, HU_MAX + 1)], dtype=np.uint8)


_LUT = _build_lut()


def window_slice(hu_slice: np.ndarray) -> np.ndarray:
    """Windowed 8-bit image of a HU slice (vectorized LUT application)."""
    hu = np.clip(hu_slice, HU_MIN, HU_MAX).astype(np.int64)
    return _LUT[hu - HU_MIN]


def model_input(hu_slice: np.ndarray) -> np.ndarray:
    """Network-ready [1, H, W] float64 input in [0, 1]: windowed bytes / 255."""
    return (window_slice(hu_slice).astype(np.float64) / 255.0)[None, :, :]


@dataclass(frozen=True)
class ContourPolygon:
    """Closed polygon on one axial slice; vertices are (x_mm, y_mm) pairs."""

    vertices_mm: np.ndarray  # [n, 2]

    def __post_init__(self) -> None:
        if self.vertices_mm.ndim != 2 or self.vertices_mm.shape[1] != 2:
            raise ValueError(f"vertices must be [n, 2], got {self.vertices_mm.shape}")


@dataclass(frozen=True)
class SliceGeometry:
    """Pixel grid of one slice: corner origin, spacing, and shape.

    Pixel (row, col) has its center at
    (origin_y + (row + 0.5) * spacing_y, origin_x + (col + 0.5) * spacing_x).
    """

    origin_mm: tuple[float, float]  # (y, x) of the outer corner of pixel (0, 0)
    spacing_mm: tuple[float, float]  # (y, x)
    shape: tuple[int, int]  # (H, W)


def rasterize_contour(polygons: list[ContourPolygon], geometry: SliceGeometry) -> np.ndarray:
    """Even-odd scanline fill of one or more polygons onto the pixel grid.

    A pixel belongs to the mask iff its center lies inside the polygon
    under the even-odd rule; edges crossing exactly through a center
    are resolved by the half-open [ymin, ymax) vertex convention.
    Multiple polygons combine by XOR, so holes are representable.
    Degenerate polygons (< 3 vertices or zero area) contribute nothing
    beyond a warning.
    """
    h, w = geometry.shape
    mask = np.zeros((h, w), dtype=np.uint8)
    oy, ox = geometry.origin_mm
    sy, sx = geometry.spacing_mm
    centers_x = ox + (np.arange(w) + 0.5) * sx
    for poly in polygons:
        verts = np.asarray(poly.vertices_mm, dtype=np.float64)
        if len(verts) < 3 or _polygon_area(verts) == 0.0:
            log.warning("degenerate polygon with %d vertices skipped", len(verts))
            continue
        x0, y0 = verts[:, 0], verts[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        for row in range(h):
            cy = oy + (row + 0.5) * sy
            # half-open rule: an edge spans the scanline iff min(y) <= cy < max(y)
            crosses = ((y0 <= cy) & (y1 > cy)) | ((y1 <= cy) & (y0 > cy))
            if not crosses.any():
                continue
            t = (cy - y0[crosses]) / (y1[crosses] - y0[crosses])
            xs = x0[crosses] + t * (x1[crosses] - x0[crosses])
            inside = (xs[None, :] > centers_x[:, None]).sum(axis=1) % 2 == 1
            mask[row] ^= inside.astype(np.uint8)
    return mask


def _polygon_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


@dataclass
class PatientRecord:
    """One patient: HU slice stack, ground-truth mask stack, and geometry."""

    patient_id: str
    acquisition_date: str  # ISO-8601 day
    hu: np.ndarray  # [D, H, W] int16
    mask: np.ndarray  # [D, H, W] uint8 in {0, 1}
    spacing_mm: tuple[float, float, float]  # (z, y, x)
    z_positions_mm: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.hu.shape != self.mask.shape:
            raise ValueError(
                f"{self.patient_id}: mask shape {self.mask.shape} != image shape {self.hu.shape}"
            )
        if not self.z_positions_mm:
            self.z_positions_mm = [i * self.spacing_mm[0] for i in range(len(self.hu))]

    @property
    def n_slices(self) -> int:
        return len(self.hu)


def save_dataset(records: list[PatientRecord], out_dir: str) -> str:
    """Write records in the v1 format; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    patients = []
    for rec in records:
        pdir = os.path.join(out_dir, rec.patient_id)
        os.makedirs(pdir, exist_ok=True)
        slices = []
        for i in range(rec.n_slices):
            img_rel = f"{rec.patient_id}/slice_{i:04d}.i16"
            mask_rel = f"{rec.patient_id}/mask_{i:04d}.u8"
            rec.hu[i].astype("<i2").tofile(os.path.join(out_dir, img_rel))
            rec.mask[i].astype(np.uint8).tofile(os.path.join(out_dir, mask_rel))
            slices.append({"image": img_rel, "mask": mask_rel, "z_mm": rec.z_positions_mm[i]})
        patients.append(
            {
                "id": rec.patient_id,
                "acquisition_date": rec.acquisition_date,
                "spacing_mm": list(rec.spacing_mm),
                "slice_shape": list(rec.hu.shape[1:]),
                "slices": slices,
            }
        )
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w") as fh:
        json.dump({"version": 1, "patients": patients}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_dataset(manifest_path: str) -> list[PatientRecord]:
    """Load and validate a v1 dataset; patients come back ordered by id."""
    if not os.path.isfile(manifest_path):
        raise DatasetError(manifest_path, "manifest not found")
    try:
        with open(manifest_path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(manifest_path, f"malformed manifest: {exc}") from exc
    if not isinstance(doc, dict) or "patients" not in doc:
        raise DatasetError(manifest_path, "malformed manifest: missing 'patients'")
    root = os.path.dirname(os.path.abspath(manifest_path))

    records = []
    for pat in doc["patients"]:
        try:
            pid = pat["id"]
            shape = tuple(pat["slice_shape"])
            spacing = tuple(float(s) for s in pat["spacing_mm"])
            date = pat["acquisition_date"]
            slices = pat["slices"]
        except (KeyError, TypeError) as exc:
            raise DatasetError(manifest_path, f"malformed patient entry: {exc}") from exc
        hu = np.empty((len(slices), *shape), dtype=np.int16)
        mask = np.empty((len(slices), *shape), dtype=np.uint8)
        zpos = []
        for i, sl in enumerate(slices):
            hu[i] = _read_raw(os.path.join(root, sl["image"]), shape, "<i2")
            mask[i] = _read_raw(os.path.join(root, sl["mask"]), shape, "u1")
            zpos.append(float(sl["z_mm"]))
        if hu.min() < HU_MIN or hu.max() > HU_MAX:
            raise DatasetError(manifest_path, f"patient {pid}: HU outside [{HU_MIN}, {HU_MAX}]")
        if not np.isin(np.unique(mask), (0, 1)).all():
            raise DatasetError(manifest_path, f"patient {pid}: mask values outside {{0, 1}}")
        lo, hi = CLINICAL_SLICE_RANGE
        if not lo <= len(slices) <= hi:
            log.warning("patient %s has %d slices, outside the clinical range [%d, %d]",
                        pid, len(slices), lo, hi)
        records.append(PatientRecord(pid, date, hu, mask, spacing, zpos))
    records.sort(key=lambda r: r.patient_id)
    return records


def _read_raw(path: str, shape: tuple[int, int], dtype: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise DatasetError(path, "slice file missing")
    data = np.fromfile(path, dtype=dtype)
    expected = shape[0] * shape[1]
    if data.size != expected:
        raise DatasetError(path, f"expected {expected} values for shape {shape}, found {data.size}")
    return data.reshape(shape)
