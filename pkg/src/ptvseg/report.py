"""Aggregate per-patient metrics into summary statistics and boxplot figures.

Statistics follow the reporting style "mean +/- std over all patients
across all folds" with the population (not sample) standard deviation,
since the cohort is the whole population being described. Quartiles use
linear interpolation; whiskers extend to the most extreme data points
within 1.5 * IQR of the quartiles, and everything beyond is listed as
an outlier. The SVG renderer is hand-rolled string assembly, so output
is byte-identical for identical input.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ReportError

CSV_HEADER = ["patient_id", "dsc", "hd95_mm"]


@dataclass(frozen=True)
class SummaryStats:
    n: int
    mean: float
    std: float  # population
    min: float
    max: float
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]


@dataclass(frozen=True)
class ReportRow:
    patient_id: str
    dsc: float
    hd95_mm: float | None


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[ReportRow, ...]
    dsc: SummaryStats
    hd95: SummaryStats | None  # None when every patient's HD95 was undefined
    hd95_undefined_count: int


def summarize(values: list[float]) -> SummaryStats:
    """Five-number summary plus mean/std and the Tukey outlier split."""
    if not values:
        raise ReportError("cannot summarize an empty value list")
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = (float(np.percentile(v, q)) for q in (25, 50, 75))
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = tuple(float(x) for x in np.sort(v[(v < lo_fence) | (v > hi_fence)]))
    return SummaryStats(
        n=len(v),
        mean=float(v.mean()),
        std=float(v.std()),
        min=float(v.min()),
        max=float(v.max()),
        q1=q1,
        median=med,
        q3=q3,
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=outliers,
    )


def aggregate(rows: list[ReportRow]) -> MetricReport:
    """Build the full report for one model's per-patient rows."""
    if not rows:
        raise ReportError("cannot aggregate an empty report")
    dsc_stats = summarize([r.dsc for r in rows])
    hd_vals = [r.hd95_mm for r in rows if r.hd95_mm is not None]
    undefined = len(rows) - len(hd_vals)
    hd_stats = summarize(hd_vals) if hd_vals else None
    return MetricReport(tuple(rows), dsc_stats, hd_stats, undefined)


def write_csv(report: MetricReport, path: str) -> None:
    """Per-patient rows as RFC-4180 CSV with 6-decimal fixed-point values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow(
                [r.patient_id, f"{r.dsc:.6f}", "" if r.hd95_mm is None else f"{r.hd95_mm:.6f}"]
            )


def read_metrics_csv(path: str) -> list[ReportRow]:
    """Read rows from either the report CSV or the cross-validation CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            hd = rec.get("hd95_mm", "")
            rows.append(
                ReportRow(
                    patient_id=rec["patient_id"],
                    dsc=float(rec["dsc"]),
                    hd95_mm=float(hd) if hd else None,
                )
            )
    if not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


# ---------------------------------------------------------------- SVG ----

FIG_W, FIG_H = 360, 420
MARGIN_TOP, MARGIN_BOTTOM = 40, 50
MARGIN_LEFT, MARGIN_RIGHT = 70, 20
BOX_FILL = "#9ecae1"
N_TICKS = 6


def value_to_y(value: float, lo: float, hi: float) -> float:
    """Linear data-to-pixel transform used by the boxplot renderer."""
    span = hi - lo if hi > lo else 1.0
    frac = (value - lo) / span
    return MARGIN_TOP + (FIG_H - MARGIN_TOP - MARGIN_BOTTOM) * (1.0 - frac)


def _fmt(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".") if x == x else "nan"


def render_boxplot_svg(reports: dict[str, MetricReport], metric: str) -> str:
    """One figure with a box per report (e.g. per loss), for 'dsc' or 'hd95'.

    Reports whose HD95 is entirely undefined are rejected for the hd95
    metric. Output is deterministic for fixed input.
    """
    metric = metric.lower()
    if metric not in ("dsc", "hd95"):
        raise ReportError(f"metric must be 'dsc' or 'hd95', got {metric!r}")
    if not reports:
        raise ReportError("no reports to plot")
    stats: dict[str, SummaryStats] = {}
    for label, rep in reports.items():
        st = rep.dsc if metric == "dsc" else rep.hd95
        if st is None:
            raise ReportError(f"report {label!r} has no defined {metric} values")
        stats[label] = st

    title = "Dice similarity coefficient" if metric == "dsc" else "95% Hausdorff distance"
    unit = "" if metric == "dsc" else " (mm)"
    lo = min(min(s.whisker_low, *(s.outliers or (s.whisker_low,))) for s in stats.values())
    hi = max(max(s.whisker_high, *(s.outliers or (s.whisker_high,))) for s in stats.values())
    if hi == lo:
        hi = lo + 1.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{FIG_W}" height="{FIG_H}" '
        f'viewBox="0 0 {FIG_W} {FIG_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{FIG_W}" height="{FIG_H}" fill="white"/>',
        f'<text x="{FIG_W / 2}" y="22" text-anchor="middle" font-size="13">{title}{unit}</text>',
    ]
    axis_x = MARGIN_LEFT
    plot_bottom = FIG_H - MARGIN_BOTTOM
    parts.append(
        f'<line x1="{axis_x}" y1="{MARGIN_TOP}" x2="{axis_x}" y2="{plot_bottom}" stroke="black"/>'
    )
    for i in range(N_TICKS + 1):
        tv = lo + (hi - lo) * i / N_TICKS
        ty = value_to_y(tv, lo, hi)
        parts.append(f'<line x1="{axis_x - 4}" y1="{ty:.2f}" x2="{axis_x}" y2="{ty:.2f}" stroke="black"/>')
        parts.append(
            f'<text x="{axis_x - 8}" y="{ty + 3.5:.2f}" text-anchor="end">{_fmt(tv)}</text>'
        )

    slot_w = (FIG_W - MARGIN_LEFT - MARGIN_RIGHT) / max(len(stats), 1)
    box_w = min(70.0, slot_w * 0.5)
    for i, (label, s) in enumerate(stats.items()):
        cx = MARGIN_LEFT + slot_w * (i + 0.5)
        y_q1 = value_to_y(s.q1, lo, hi)
        y_q3 = value_to_y(s.q3, lo, hi)
        y_med = value_to_y(s.median, lo, hi)
        y_wlo = value_to_y(s.whisker_low, lo, hi)
        y_whi = value_to_y(s.whisker_high, lo, hi)
        parts += [
            f'<line x1="{cx:.2f}" y1="{y_wlo:.2f}" x2="{cx:.2f}" y2="{y_q1:.2f}" stroke="black"/>',
            f'<line x1="{cx:.2f}" y1="{y_q3:.2f}" x2="{cx:.2f}" y2="{y_whi:.2f}" stroke="black"/>',
            f'<line x1="{cx - box_w / 4:.2f}" y1="{y_wlo:.2f}" x2="{cx + box_w / 4:.2f}" y2="{y_wlo:.2f}" stroke="black"/>',
            f'<line x1="{cx - box_w / 4:.2f}" y1="{y_whi:.2f}" x2="{cx + box_w / 4:.2f}" y2="{y_whi:.2f}" stroke="black"/>',
            f'<rect x="{cx - box_w / 2:.2f}" y="{y_q3:.2f}" width="{box_w:.2f}" '
            f'height="{y_q1 - y_q3:.2f}" fill="{BOX_FILL}" stroke="black" data-role="box"/>',
            f'<line x1="{cx - box_w / 2:.2f}" y1="{y_med:.2f}" x2="{cx + box_w / 2:.2f}" '
            f'y2="{y_med:.2f}" stroke="black" stroke-width="1.5" data-role="median"/>',
            f'<text x="{cx:.2f}" y="{plot_bottom + 18}" text-anchor="middle">{label}</text>',
            f'<text x="{cx:.2f}" y="{plot_bottom + 34}" text-anchor="middle" font-size="10">'
            f'{s.mean:.3f} &#177; {s.std:.3f}</text>',
        ]
        for out in s.outliers:
            oy = value_to_y(out, lo, hi)
            parts.append(
                f'<circle cx="{cx:.2f}" cy="{oy:.2f}" r="2.5" fill="none" stroke="black"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
