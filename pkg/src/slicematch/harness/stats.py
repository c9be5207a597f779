"""Aggregate statistics, table/summary emission, and error-distribution export.

The summary mirrors the comparison-table layout: one column per method, rows
for mean/std/median rotation and translation error plus the two joint
success percentages. Standard deviation is the population one (ddof = 0) and
medians use the midpoint rule; success percentages always apply the joint
rotation-AND-translation condition, so a case with 4 deg / 20 mm counts as a
failure at the 15-degree threshold.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .pipeline import METHODS, CaseRecord


@dataclass(frozen=True)
class MethodStats:
    rot_mean: float
    rot_std: float
    rot_median: float
    trans_mean: float
    trans_std: float
    trans_median: float
    pct_success_15: float
    pct_success_5: float
    n_cases: int
    n_failures: int

    def __post_init__(self):
        for pct in (self.pct_success_15, self.pct_success_5):
            if not (0.0 <= pct <= 100.0):
                raise ValueError("percentages must lie in [0, 100]")


@dataclass(frozen=True)
class StatsSummary:
    per_method: dict  # method tag -> MethodStats

    def methods(self) -> list:
        return [m for m in METHODS if m in self.per_method] + sorted(
            set(self.per_method) - set(METHODS)
        )


def aggregate(records) -> StatsSummary:
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    per_method = {}
    for method in {r.method for r in records}:
        group = [r for r in records if r.method == method]
        rot = np.array([r.rotation_deg for r in group])
        trans = np.array([r.translation_mm for r in group])
        per_method[method] = MethodStats(
            rot_mean=float(rot.mean()),
            rot_std=float(rot.std()),
            rot_median=float(np.median(rot)),
            trans_mean=float(trans.mean()),
            trans_std=float(trans.std()),
            trans_median=float(np.median(trans)),
            pct_success_15=100.0 * sum(r.success_15 for r in group) / len(group),
            pct_success_5=100.0 * sum(r.success_5 for r in group) / len(group),
            n_cases=len(group),
            n_failures=sum(r.failed for r in group),
        )
    return StatsSummary(per_method)


_ROWS = (
    ("rot_mean_deg", "rot_mean"), ("rot_std_deg", "rot_std"),
    ("rot_median_deg", "rot_median"), ("trans_mean_mm", "trans_mean"),
    ("trans_std_mm", "trans_std"), ("trans_median_mm", "trans_median"),
    ("success_15deg_15mm_pct", "pct_success_15"),
    ("success_5deg_5mm_pct", "pct_success_5"),
    ("cases", "n_cases"), ("failures", "n_failures"),
)


def write_summary(summary: StatsSummary, out_dir: str) -> None:
    """summary.json (full precision) and summary.csv (table layout)."""
    os.makedirs(out_dir, exist_ok=True)
    methods = summary.methods()
    payload = {
        m: {label: getattr(summary.per_method[m], attr) for label, attr in _ROWS}
        for m in methods
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + methods)
        for label, attr in _ROWS:
            row = [label]
            for m in methods:
                value = getattr(summary.per_method[m], attr)
                row.append(str(value) if isinstance(value, int)
                           else f"{value:.4f}")
            writer.writerow(row)


def write_records(records, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "method", "rotation_deg", "translation_mm",
                         "success_15", "success_5", "runtime_s", "match_count",
                         "failed"])
        for r in records:
            writer.writerow([
                r.case_id, r.method, repr(float(r.rotation_deg)),
                repr(float(r.translation_mm)), int(r.success_15),
                int(r.success_5), f"{r.runtime_s:.3f}", r.match_count,
                int(r.failed),
            ])


def read_records(path: str) -> list:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(CaseRecord(
                case_id=row["case_id"], method=row["method"],
                rotation_deg=float(row["rotation_deg"]),
                translation_mm=float(row["translation_mm"]),
                success_15=bool(int(row["success_15"])),
                success_5=bool(int(row["success_5"])),
                runtime_s=float(row["runtime_s"]),
                match_count=int(row["match_count"]),
                failed=bool(int(row["failed"])),
            ))
    return records


# -- distribution export ---------------------------------------------------------


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), with a unit fallback for tiny spread."""
    n = len(values)
    std = float(values.std())
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std if std > 0 else 1.0
    return 0.9 * spread * n ** (-0.2)


def kde_curve(values: np.ndarray, n_grid: int = 401):
    """Gaussian KDE sampled on a grid covering the data +- 4 bandwidths."""
    bw = silverman_bandwidth(values)
    grid = np.linspace(values.min() - 4 * bw, values.max() + 4 * bw, n_grid)
    z = (grid[:, None] - values[None, :]) / bw
    density = np.exp(-0.5 * z * z).sum(axis=1) / (len(values) * bw * np.sqrt(2 * np.pi))
    return grid, density, bw


def _violin_svg(curves: dict) -> str:
    """Static SVG with mirrored density outlines per method and metric."""
    lane_w, lane_h, pad = 160, 220, 40
    methods = list(curves)
    metrics = ["rotation_deg", "translation_mm"]
    width = pad * 2 + lane_w * max(len(methods), 1)
    height = pad * 2 + lane_h * len(metrics)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for row, metric in enumerate(metrics):
        y0 = pad + row * lane_h
        parts.append(
            f'<text x="{pad}" y="{y0 + 14}" font-size="13" '
            f'font-family="sans-serif">{metric}</text>'
        )
        for col, method in enumerate(methods):
            grid, density, _ = curves[method][metric]
            cx = pad + col * lane_w + lane_w / 2
            g0, g1 = grid[0], grid[-1]
            dmax = density.max() if density.max() > 0 else 1.0
            ys = y0 + 30 + (grid - g0) / max(g1 - g0, 1e-12) * (lane_h - 60)
            xs = density / dmax * (lane_w / 2 - 12)
            right = [f"{cx + x:.2f},{y:.2f}" for x, y in zip(xs, ys)]
            left = [f"{cx - x:.2f},{y:.2f}" for x, y in zip(xs[::-1], ys[::-1])]
            parts.append(
                f'<polygon points="{" ".join(right + left)}" fill="#9ecae1" '
                f'stroke="#3182bd" stroke-width="1"/>'
            )
            if row == len(metrics) - 1:
                parts.append(
                    f'<text x="{cx:.2f}" y="{height - 10}" font-size="12" '
                    f'text-anchor="middle" font-family="sans-serif">{method}</text>'
                )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_distribution(records, out_dir: str) -> None:
    """Raw per-method error arrays (CSV), KDE samples (JSON), and an SVG violin."""
    records = list(records)
    if not records:
        raise ValueError("no records to export")
    os.makedirs(out_dir, exist_ok=True)
    methods = [m for m in METHODS if any(r.method == m for r in records)]
    methods += sorted({r.method for r in records} - set(methods))

    with open(os.path.join(out_dir, "errors.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "case_id", "rotation_deg", "translation_mm"])
        for m in methods:
            for r in records:
                if r.method == m:
                    writer.writerow([m, r.case_id, repr(float(r.rotation_deg)),
                                     repr(float(r.translation_mm))])

    curves, payload = {}, {}
    for m in methods:
        group = [r for r in records if r.method == m]
        curves[m], payload[m] = {}, {}
        for metric, values in (
            ("rotation_deg", np.array([r.rotation_deg for r in group])),
            ("translation_mm", np.array([r.translation_mm for r in group])),
        ):
            grid, density, bw = kde_curve(values)
            curves[m][metric] = (grid, density, bw)
            payload[m][metric] = {
                "bandwidth": bw,
                "grid": grid.tolist(),
                "density": density.tolist(),
            }
    with open(os.path.join(out_dir, "density.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "violin.svg"), "w") as fh:
        fh.write(_violin_svg(curves))
