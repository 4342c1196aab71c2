"""Saliency evaluation over point sets: MAE, precision/recall, F-measure,
E-measure, IoU and threshold sweeps."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kvfile

BETA_SQ = 0.3
E_EPS = 1e-12
CURVE_COLUMNS = ("threshold", "precision", "recall", "f_measure", "e_measure")


def default_thresholds(count: int = 255) -> np.ndarray:
    """``count`` evenly spaced thresholds strictly inside (0, 1)."""
    return np.arange(1, count + 1) / (count + 1)


def _pair(a, b, name: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"{name}: length mismatch {a.shape} vs {b.shape}")
    return a, b


def mae(saliency, gt) -> float:
    s, g = _pair(saliency, gt, "mae")
    return float(np.mean(np.abs(s.astype(np.float64) - g)))


def precision_recall(pred_mask, gt) -> tuple[float, float]:
    """No positive predictions gives precision 0; an empty gt gives recall 1."""
    p, g = _pair(pred_mask, gt, "precision_recall")
    p, g = p.astype(bool), g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    n_pred, n_gt = int(np.count_nonzero(p)), int(np.count_nonzero(g))
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 1.0
    return precision, recall


def f_measure(precision, recall, beta_sq: float = BETA_SQ):
    """Weighted harmonic mean ``(1 + b2) P R / (b2 P + R)``; 0 on a zero denominator."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta_sq * p + r
    out = np.where(den > 0, (1 + beta_sq) * p * r / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def e_measure(pred_mask, gt) -> float:
    """Enhanced alignment averaged over points.

    Both binary maps are centred on their means; the per-point alignment
    ``2 a b / (a^2 + b^2 + eps)`` is mapped through ``(1 + x)^2 / 4``.
    A constant gt falls back to ``1 - mean|pred - gt|``.
    """
    p, g = _pair(pred_mask, gt, "e_measure")
    p, g = p.astype(np.float64), g.astype(np.float64)
    if np.all(g == g[0]):
        return float(1.0 - np.mean(np.abs(p - g)))
    a, b = p - p.mean(), g - g.mean()
    align = 2.0 * a * b / (a * a + b * b + E_EPS)
    return float(np.mean(0.25 * (1.0 + align) ** 2))


def iou(pred_mask, gt) -> float:
    """Intersection over union; two empty masks score 1."""
    p, g = _pair(pred_mask, gt, "iou")
    p, g = p.astype(bool), g.astype(bool)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def _e_from_counts(tp, fp, fn, tn, n):
    """E-measure of a binarized map from its confusion counts (vectorized)."""
    tp, fp, fn, tn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn, tn))
    mp = (tp + fp) / n
    mg = (tp + fn) / n
    total = np.zeros_like(mp)
    for pv, gv, cnt in ((1.0, 1.0, tp), (1.0, 0.0, fp), (0.0, 1.0, fn), (0.0, 0.0, tn)):
        a, b = pv - mp, gv - mg
        align = 2.0 * a * b / (a * a + b * b + E_EPS)
        total += cnt * 0.25 * (1.0 + align) ** 2
    score = total / n
    degenerate = (mg == 0) | (mg == 1)
    return np.where(degenerate, 1.0 - (fp + fn) / n, score)


@dataclass
class Curve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_measure: np.ndarray
    e_measure: np.ndarray

    def rows(self) -> np.ndarray:
        return np.column_stack([self.thresholds, self.precision, self.recall, self.f_measure, self.e_measure])

    def __len__(self) -> int:
        return self.thresholds.shape[0]


def threshold_sweep(saliency, gt, thresholds=None, beta_sq: float = BETA_SQ) -> Curve:
    """Binarize ``saliency >= t`` for each threshold and score the masks."""
    s, g = _pair(saliency, gt, "threshold_sweep")
    t = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0):
        raise ValueError("threshold_sweep: thresholds must be strictly increasing")
    s = s.astype(np.float64)
    g = g.astype(bool)
    n = s.shape[0]
    all_sorted = np.sort(s)
    pos_sorted = np.sort(s[g])
    n_pred = n - np.searchsorted(all_sorted, t, side="left")
    tp = pos_sorted.shape[0] - np.searchsorted(pos_sorted, t, side="left")
    n_gt = pos_sorted.shape[0]
    fp = n_pred - tp
    fn = n_gt - tp
    tn = n - n_pred - fn
    precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 0.0)
    recall = tp / n_gt if n_gt else np.ones_like(t)
    return Curve(t, precision, np.asarray(recall, dtype=np.float64), f_measure(precision, recall, beta_sq),
                 _e_from_counts(tp, fp, fn, tn, n))


@dataclass
class SampleReport:
    name: str
    mae: float
    f_measure: float
    e_measure: float
    iou: float
    curve: Curve


def evaluate_sample(saliency, gt, name: str = "", thresholds=None, beta_sq: float = BETA_SQ,
                    iou_threshold: float = 0.5) -> SampleReport:
    """Per-sample scores: F and E are maxima over the sweep, IoU is at ``iou_threshold``."""
    s, g = _pair(saliency, gt, "evaluate_sample")
    curve = threshold_sweep(s, g, thresholds, beta_sq)
    return SampleReport(
        name,
        mae(s, g),
        float(curve.f_measure.max()),
        float(curve.e_measure.max()),
        iou(s >= iou_threshold, g),
        curve,
    )


@dataclass
class EvalReport:
    samples: list[SampleReport]
    mae: float
    f_measure: float
    e_measure: float
    iou: float
    curve: Curve
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {
            "n_samples": len(self.samples),
            "mae": self.mae,
            "f_measure": self.f_measure,
            "e_measure": self.e_measure,
            "iou": self.iou,
        }
        for s in self.samples:
            for key in ("mae", "f_measure", "e_measure", "iou"):
                out[f"sample.{s.name}.{key}"] = float(getattr(s, key))
        return out


def aggregate(samples: Sequence[SampleReport]) -> EvalReport:
    """Dataset means; the reported F and E are maxima of the mean curve."""
    samples = list(samples)
    if not samples:
        raise ValueError("aggregate: no samples")
    t0 = samples[0].curve.thresholds
    for s in samples[1:]:
        if not np.array_equal(s.curve.thresholds, t0):
            raise ValueError("aggregate: samples were swept over different thresholds")
    stack = np.stack([s.curve.rows() for s in samples])
    mean_rows = stack.mean(axis=0)
    curve = Curve(t0.copy(), *(mean_rows[:, i] for i in range(1, 5)))
    return EvalReport(
        samples,
        float(np.mean([s.mae for s in samples])),
        float(curve.f_measure.max()),
        float(curve.e_measure.max()),
        float(np.mean([s.iou for s in samples])),
        curve,
    )


def write_curve_csv(curve: Curve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in curve.rows():
            w.writerow([repr(float(v)) for v in row])


def read_curve_csv(path: str | Path) -> Curve:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header) != CURVE_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(CURVE_COLUMNS)}")
        rows = np.array([[float(v) for v in row] for row in r], dtype=np.float64).reshape(-1, 5)
    return Curve(*(rows[:, i].copy() for i in range(5)))


def write_report(report: EvalReport, path: str | Path) -> None:
    kvfile.write(path, report.to_dict())


def read_report(path: str | Path) -> dict[str, float]:
    return {k: float(v) for k, v in kvfile.read(path).items()}
