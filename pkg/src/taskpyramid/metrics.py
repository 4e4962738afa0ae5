"""Per-task quality metrics and the multi-task performance measure.

All metrics are pure functions of numpy arrays.  The multi-task measure is
the direction-corrected average relative change of each task metric against
a single-task baseline, reported in percent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataError

IGNORE_INDEX = 255


def miou(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    """Mean intersection-over-union across classes present in the ground truth.

    Classes absent from both prediction and ground truth are excluded; pixels
    labeled ``ignore_index`` in the ground truth never count.
    """
    p = np.asarray(pred).ravel()
    g = np.asarray(gt).ravel()
    if p.shape != g.shape:
        raise ContractViolation(f"miou: shape mismatch {p.shape} vs {g.shape}")
    valid = g != ignore_index
    if not np.any(valid):
        raise DataError("miou: every pixel is ignored")
    p, g = p[valid], g[valid]
    if np.any((g < 0) | (g >= num_classes)) or np.any((p < 0) | (p >= num_classes)):
        raise DataError(f"miou: labels outside [0, {num_classes})")
    cm = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    cm = cm.reshape(num_classes, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = cm.sum(axis=1) > 0  # classes present in the ground truth
    return float((inter[present] / union[present]).mean())


def rmse(pred, gt, valid_mask=None) -> float:
    """Root mean squared error over valid pixels."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ContractViolation(f"rmse: shape mismatch {p.shape} vs {g.shape}")
    mask = np.ones(p.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    if not np.any(mask):
        raise DataError("rmse: empty valid mask")
    d = p[mask] - g[mask]
    return float(np.sqrt((d * d).mean()))


def mean_angle_error(pred, gt) -> float:
    """Mean angular error in degrees between predicted and unit ground-truth vectors.

    Arrays are (..., 3, H, W); predictions are L2-normalized first (skipped
    below a tiny-norm guard, mirroring the training loss).
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-3] != 3:
        raise ContractViolation(f"mean_angle_error: bad shapes {p.shape} vs {g.shape}")
    r = np.sqrt((p * p).sum(axis=-3, keepdims=True))
    safe = r >= 1e-8
    p = np.where(safe, p / np.where(safe, r, 1.0), p)
    dot = np.clip((p * g).sum(axis=-3), -1.0, 1.0)
    return float(np.degrees(np.arccos(dot)).mean())


def f_best(probabilities, gt, thresholds=None) -> float:
    """Best dataset-aggregated F1 over a threshold grid on the positive class.

    Defaults to 99 evenly spaced thresholds in (0, 1); precision or recall
    with an empty denominator counts as 0.
    """
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    g = np.asarray(gt).ravel().astype(bool)
    if p.shape != g.shape:
        raise ContractViolation(f"f_best: shape mismatch {p.shape} vs {g.shape}")
    if thresholds is None:
        thresholds = np.arange(1, 100) / 100.0
    best = 0.0
    for thr in thresholds:
        pos = p > thr
        tp = float(np.count_nonzero(pos & g))
        fp = float(np.count_nonzero(pos & ~g))
        fn = float(np.count_nonzero(~pos & g))
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        best = max(best, f1)
    return best


# -- reports and the multi-task measure ----------------------------------------


@dataclass
class MetricsReport:
    """Per-task metric values with their direction flags (1 = lower is better)."""

    model_id: str
    entries: dict[str, tuple[str, float, int]] = field(default_factory=dict)

    def add(self, task: str, metric: str, value: float, direction: int) -> None:
        if not np.isfinite(value):
            raise DataError(f"metrics report: non-finite value for {task}/{metric}")
        if direction not in (0, 1):
            raise ContractViolation(f"metrics report: direction must be 0 or 1, got {direction}")
        self.entries[task] = (metric, float(value), direction)

    def value(self, task: str) -> float:
        return self.entries[task][1]

    def direction(self, task: str) -> int:
        return self.entries[task][2]


def delta_m(model: MetricsReport, baseline: MetricsReport) -> float:
    """Direction-corrected mean relative metric change vs baseline, in percent.

    (1/T) * sum over tasks of (-1)^l_i * (M_model - M_base) / M_base, where
    l_i = 1 for lower-is-better metrics.
    """
    if set(model.entries) != set(baseline.entries):
        raise ContractViolation(
            f"delta_m: task sets differ: {sorted(model.entries)} vs {sorted(baseline.entries)}"
        )
    acc = 0.0
    for task in model.entries:
        if model.direction(task) != baseline.direction(task):
            raise ContractViolation(f"delta_m: direction mismatch for task {task!r}")
        base = baseline.value(task)
        if base == 0.0:
            raise ContractViolation(f"delta_m: zero baseline value for task {task!r}")
        sign = -1.0 if model.direction(task) == 1 else 1.0
        acc += sign * (model.value(task) - base) / base
    return 100.0 * acc / len(model.entries)


# -- CSV interchange --------------------------------------------------------------

METRICS_HEADER = ["model_id", "task", "metric", "value", "direction"]
DELTA_HEADER = ["model_id", "baseline_id", "delta_m_percent"]


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for task in report.entries:
            metric, value, direction = report.entries[task]
            w.writerow([report.model_id, task, metric, repr(value), direction])


def read_metrics_csv(path) -> MetricsReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise DataError(f"{path}: expected header {METRICS_HEADER}, got {header}")
        report: MetricsReport | None = None
        for row in reader:
            if len(row) != 5:
                raise DataError(f"{path}: malformed row {row}")
            model_id, task, metric, value, direction = row
            if report is None:
                report = MetricsReport(model_id)
            elif report.model_id != model_id:
                raise DataError(f"{path}: mixed model ids {report.model_id!r} and {model_id!r}")
            try:
                report.add(task, metric, float(value), int(direction))
            except ValueError as exc:
                raise DataError(f"{path}: malformed row {row}: {exc}") from exc
        if report is None or not report.entries:
            raise DataError(f"{path}: no metric rows")
        return report


def write_delta_csv(model_id: str, baseline_id: str, value: float, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DELTA_HEADER)
        w.writerow([model_id, baseline_id, f"{value:.2f}"])
