"""Five-fold cross-validation over patients, stratified by acquisition date.

Patients are sorted by (acquisition_date, patient_id) and dealt
round-robin into k folds, so every k consecutive acquisition dates are
spread across all folds. Rotation r tests on fold r, validates on fold
(r + 1) mod k, and trains on the remaining folds; across the k
rotations every patient is predicted exactly once, by a model that
never saw it. Each rotation trains with its own derived seed
(base seed + rotation index) and evaluates the best-validation-loss
checkpoint directly; per-patient DSC and HD95 are computed on the
stacked 3-D volume with the patient's voxel spacing.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import metrics, trainer, unet
from .dataprep import PatientRecord, model_input
from .errors import ConfigError
from .metrics import BinaryVolume
from .trainer import TrainConfig, TrainSample
from .unet import UNetConfig, UNetModel

METRICS_CSV_HEADER = ["patient_id", "fold", "dsc", "hd95_mm", "hd_mm", "warnings"]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    fold_of: dict[str, int]  # patient_id -> fold index
    rotations: list[tuple[int, int, tuple[int, ...]]]  # (test, val, train folds)

    def patients_in_fold(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.fold_of.items() if f == fold)


def assign_folds(patients: list[PatientRecord], k: int = 5) -> FoldPlan:
    """Deal date-sorted patients round-robin into k folds."""
    if len(patients) < k:
        raise ConfigError(f"need at least {k} patients for {k} folds, got {len(patients)}")
    ordered = sorted(patients, key=lambda p: (p.acquisition_date, p.patient_id))
    fold_of = {p.patient_id: rank % k for rank, p in enumerate(ordered)}
    rotations = [
        (r, (r + 1) % k, tuple(f for f in range(k) if f not in (r, (r + 1) % k)))
        for r in range(k)
    ]
    return FoldPlan(k, fold_of, rotations)


def patient_samples(record: PatientRecord) -> list[TrainSample]:
    """Per-slice (input, mask) training pairs for one patient."""
    return [
        (model_input(record.hu[i]), record.mask[i].astype(np.float64)[None, :, :])
        for i in range(record.n_slices)
    ]


def predict_patient(model: UNetModel, record: PatientRecord, threshold: float = 0.5) -> BinaryVolume:
    """Slice-wise inference, thresholded and stacked back into a volume."""
    pred = np.empty_like(record.mask)
    for i in range(record.n_slices):
        probs, _ = unet.unet_forward(model, model_input(record.hu[i]))
        pred[i] = metrics.binarize(probs[0], threshold)
    return BinaryVolume(pred, record.spacing_mm)


@dataclass
class PatientMetrics:
    patient_id: str
    fold: int
    dsc: float
    hd95_mm: float | None
    hd_mm: float | None
    warnings: str = ""


@dataclass
class RotationResult:
    rotation: int
    model: UNetModel
    history: list[trainer.EpochRecord]
    patient_metrics: list[PatientMetrics]


def evaluate_patient(
    model: UNetModel, record: PatientRecord, fold: int, threshold: float = 0.5
) -> PatientMetrics:
    pred = predict_patient(model, record, threshold)
    truth = BinaryVolume(record.mask, record.spacing_mm)
    d = metrics.dsc(pred, truth)
    s_pred = metrics.extract_surface(pred)
    s_true = metrics.extract_surface(truth)
    hd = metrics.hausdorff(s_pred, s_true)
    h95 = metrics.hd95(s_pred, s_true)
    warn = "" if hd is not None else "hd_undefined:empty_surface"
    return PatientMetrics(record.patient_id, fold, d, h95, hd, warn)


def _run_rotation(
    rotation_idx: int,
    dataset: list[PatientRecord],
    plan: FoldPlan,
    train_config: TrainConfig,
    unet_config: UNetConfig,
    threshold: float,
    out_dir: str | None,
) -> RotationResult:
    test_fold, val_fold, train_folds = plan.rotations[rotation_idx]
    by_id = {p.patient_id: p for p in dataset}
    train_ids = [pid for f in train_folds for pid in plan.patients_in_fold(f)]
    val_ids = plan.patients_in_fold(val_fold)
    test_ids = plan.patients_in_fold(test_fold)

    train_set = [s for pid in train_ids for s in patient_samples(by_id[pid])]
    val_set = [s for pid in val_ids for s in patient_samples(by_id[pid])]

    cfg = replace(train_config, seed=train_config.seed + rotation_idx)
    model = unet.build_unet(unet_config, cfg.seed)
    rot_dir = os.path.join(out_dir, f"rotation_{rotation_idx}") if out_dir else None
    result = trainer.run_training(model, train_set, val_set, cfg, rot_dir)

    rows = [
        evaluate_patient(result.best_model, by_id[pid], test_fold, threshold)
        for pid in test_ids
    ]
    if rot_dir is not None:
        write_metrics_csv(os.path.join(rot_dir, "metrics.csv"), rows)
    return RotationResult(rotation_idx, result.best_model, result.history, rows)


def run_cross_validation(
    dataset: list[PatientRecord],
    plan: FoldPlan,
    train_config: TrainConfig,
    unet_config: UNetConfig,
    threshold: float = 0.5,
    out_dir: str | None = None,
    jobs: int = 1,
) -> list[RotationResult]:
    """Train and evaluate every rotation; results come back in rotation order.

    Rotations are independent; ``jobs > 1`` runs them in parallel
    processes without changing any result.
    """
    args = [
        (r, dataset, plan, train_config, unet_config, threshold, out_dir)
        for r in range(plan.k)
    ]
    if jobs <= 1:
        results = [_run_rotation(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_rotation_star, args))
    if out_dir is not None:
        merged = [m for res in results for m in res.patient_metrics]
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), merged)
    return results


def _run_rotation_star(args) -> RotationResult:
    return _run_rotation(*args)


def write_metrics_csv(path: str, rows: list[PatientMetrics]) -> None:
    def fmt(x: float | None) -> str:
        return "" if x is None else f"{x:.6f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_CSV_HEADER)
        for m in rows:
            w.writerow([m.patient_id, m.fold, f"{m.dsc:.6f}", fmt(m.hd95_mm), fmt(m.hd_mm), m.warnings])
