"""Pose-estimation metrics in millimetres: per-joint error, average error, good-frame curve."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, FormatError

DEFAULT_THRESHOLDS = np.arange(0.0, 81.0, 1.0)
TABLE_WEIGHTS = np.round(np.arange(1, 10) * 0.1, 1)


def _joints(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        if a.shape[1] % 3:
            raise DimensionError(f"flat poses need 3K columns, got {a.shape[1]}")
        a = a.reshape(a.shape[0], -1, 3)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DimensionError(f"expected (N, K, 3) or (N, 3K) poses, got {a.shape}")
    return a


def joint_distances(pred, truth) -> np.ndarray:
    """(N, K) Euclidean distances."""
    p, t = _joints(pred), _joints(truth)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground-truth shape {t.shape}")
    if p.shape[0] < 1:
        raise DataError("need at least one frame")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise DataError("non-finite joint coordinates")
    return np.sqrt(np.sum((p - t) ** 2, axis=-1))


def per_joint_error(pred, truth) -> np.ndarray:
    return joint_distances(pred, truth).mean(axis=0)


def average_error(pred, truth) -> float:
    return float(per_joint_error(pred, truth).mean())


def accuracy_curve(pred, truth, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of frames whose worst joint is within each threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise DataError("thresholds must be sorted ascending")
    worst = joint_distances(pred, truth).max(axis=1)
    return (worst[None, :] <= thresholds[:, None]).mean(axis=1)


@dataclass
class MetricsReport:
    per_joint_error: np.ndarray
    average_error: float
    thresholds: np.ndarray
    accuracy: np.ndarray

    @property
    def accuracy_curve(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds.tolist(), self.accuracy.tolist()))

    def write_report(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["joint", "error_mm"])
            for k, e in enumerate(self.per_joint_error):
                w.writerow([k, f"{e:.6f}"])
            w.writerow(["average", f"{self.average_error:.6f}"])

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_mm", "fraction"])
            for d, f in self.accuracy_curve:
                w.writerow([f"{d:g}", f"{f:.6f}"])

    def curve_svg(self, width: int = 480, height: int = 320) -> str:
        pad = 40
        t, a = self.thresholds, self.accuracy
        span = max(float(t[-1] - t[0]), 1e-12)
        xs = pad + (t - t[0]) / span * (width - 2 * pad)
        ys = height - pad - a * (height - 2 * pad)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
            'fill="none" stroke="black"/>\n'
            f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>\n'
            f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">'
            'max joint error threshold (mm)</text>\n'
            f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
            'text-anchor="middle">fraction of frames</text>\n'
            f'<text x="{pad}" y="{height - pad + 14}" font-size="10">{t[0]:g}</text>\n'
            f'<text x="{width - pad}" y="{height - pad + 14}" font-size="10" text-anchor="end">{t[-1]:g}</text>\n'
            "</svg>\n"
        )


def evaluate(pred, truth, thresholds=DEFAULT_THRESHOLDS) -> MetricsReport:
    pje = per_joint_error(pred, truth)
    th = np.asarray(thresholds, dtype=np.float64)
    return MetricsReport(pje, float(pje.mean()), th, accuracy_curve(pred, truth, th))


def fixed_weight_fusion_sweep(j_temp, j_spa, truth, weights=TABLE_WEIGHTS) -> list[tuple[float, float]]:
    """Average error of ``w * J_temp + (1 - w) * J_spa`` for each fixed w."""
    jt, js = _joints(j_temp), _joints(j_spa)
    if jt.shape != js.shape:
        raise DimensionError(f"temporal {jt.shape} and spatial {js.shape} predictions differ in shape")
    out = []
    for w in np.asarray(weights, dtype=np.float64):
        if not 0.0 <= w <= 1.0:
            raise DataError(f"fusion weight {w} outside [0, 1]")
        out.append((float(w), average_error(w * jt + (1.0 - w) * js, truth)))
    return out


def write_poses(path, poses) -> None:
    """One frame per line, 3K space-separated decimals."""
    a = np.asarray(poses, dtype=np.float64)
    a = a.reshape(a.shape[0], -1)
    lines = [" ".join(f"{v:.6f}" for v in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> np.ndarray:
    text = Path(path).read_text()
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows:
        raise DataError(f"{path}: no frames")
    if len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: lines disagree on the number of values")
    try:
        return np.asarray(rows, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
