"""Evaluation protocol: threshold-optimized pixel F1 and FPR-limited curves.

All pixel metrics pool every image of a category (micro averaging).  The
ROC and per-region-overlap curves are integrated only up to a false
positive rate limit and renormalized by that limit, which is the
convention the challenge benchmark reports as the "_0.05" metrics.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError, ValidationError
from .features import atomic_write_bytes
from .scorer import fill_holes

F1_SWEEP_QUANTILES = 1024
PRO_CURVE_CAP = 4096
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

CSV_COLUMNS = (
    "category",
    "pixel_f1",
    "precision",
    "recall",
    "auroc_0.05",
    "aupro_0.05",
    "class_f1",
    "threshold",
    "image_threshold",
)


@dataclass(frozen=True)
class EvalResult:
    """Per-category metric bundle at the chosen thresholds."""

    category: str
    threshold: float
    pixel_f1: float
    precision: float
    recall: float
    auroc_limit: float
    aupro_limit: float
    class_f1: float
    image_threshold: float
    counts: tuple[int, int, int, int]  # pixel TP, FP, FN, TN

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "threshold": self.threshold,
            "pixel_f1": self.pixel_f1,
            "precision": self.precision,
            "recall": self.recall,
            "auroc_0.05": self.auroc_limit,
            "aupro_0.05": self.aupro_limit,
            "class_f1": self.class_f1,
            "image_threshold": self.image_threshold,
            "counts": {
                "tp": self.counts[0],
                "fp": self.counts[1],
                "fn": self.counts[2],
                "tn": self.counts[3],
            },
        }

    def csv_row(self) -> list[str]:
        return [
            self.category,
            repr(self.pixel_f1),
            repr(self.precision),
            repr(self.recall),
            repr(self.auroc_limit),
            repr(self.aupro_limit),
            repr(self.class_f1),
            repr(self.threshold),
            repr(self.image_threshold),
        ]


def _validate_pairs(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> None:
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction maps vs {len(gts)} ground-truth maps")
    if not preds:
        raise ValidationError("need at least one map")
    for i, (p, g) in enumerate(zip(preds, gts)):
        if p.shape != g.shape:
            raise ValidationError(f"pair {i}: prediction {p.shape} vs ground truth {g.shape}")


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def pixel_f1(
    preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]
) -> tuple[float, float, float, tuple[int, int, int, int]]:
    """Micro-averaged pixel F1 over a set of binarized maps.

    Returns (f1, precision, recall, (TP, FP, FN, TN)); zero denominators
    yield metric value 0.
    """
    _validate_pairs(preds, gts)
    tp = fp = fn = tn = 0
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        tp += int((p & g).sum())
        fp += int((p & ~g).sum())
        fn += int((~p & g).sum())
        tn += int((~p & ~g).sum())
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return _f1_from_counts(tp, fp, fn), precision, recall, (tp, fp, fn, tn)


def _threshold_candidates(pooled: np.ndarray) -> np.ndarray:
    """Evenly spaced rank quantiles of the pooled scores, plus the max.

    When the pool holds at most F1_SWEEP_QUANTILES values the grid contains
    every unique value, so the sweep is exhaustive.
    """
    levels = np.linspace(0.0, 1.0, F1_SWEEP_QUANTILES)
    cands = np.quantile(pooled, levels, method="lower")
    return np.unique(np.append(cands, pooled.max()))


def _best_threshold_flat(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Sweep candidate thresholds over pooled scores; smallest argmax wins."""
    cands = _threshold_candidates(scores)
    order = np.argsort(scores, kind="stable")
    s_asc = scores[order]
    y_asc = labels[order]
    total_pos = int(labels.sum())
    suffix_pos = np.concatenate([np.cumsum(y_asc[::-1].astype(np.int64))[::-1], [0]])
    idx = np.searchsorted(s_asc, cands, side="right")
    tp = suffix_pos[idx]
    predicted = scores.size - idx
    fp = predicted - tp
    fn = total_pos - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    best = int(np.argmax(f1))  # candidates ascend, so first max = smallest threshold
    return float(cands[best]), float(f1[best])


def best_threshold(
    maps: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    hole_fill: bool = False,
) -> tuple[float, float]:
    """Threshold maximizing micro pixel F1 over the pooled score maps.

    Candidates are rank quantiles of the pooled distribution plus the pooled
    maximum; binarization is strict (score > t).  With ``hole_fill`` the
    enclosed-region fill runs on every binarized map before counting, same
    as the final evaluation.
    """
    _validate_pairs(maps, gts)
    gts = [np.asarray(g, dtype=bool) for g in gts]
    pooled = np.concatenate([np.asarray(m).ravel().astype(np.float64) for m in maps])
    labels = np.concatenate([g.ravel() for g in gts])
    if not labels.any():
        raise UndefinedMetricError("threshold optimum undefined: ground truth has no anomalous pixel")
    if not hole_fill:
        return _best_threshold_flat(pooled, labels)

    best_t, best_f1 = 0.0, -1.0
    for t in _threshold_candidates(pooled):
        tp = fp = fn = 0
        for m, g in zip(maps, gts):
            pred = fill_holes(np.asarray(m) > t)
            tp += int((pred & g).sum())
            fp += int((pred & ~g).sum())
            fn += int((~pred & g).sum())
        f1 = _f1_from_counts(tp, fp, fn)
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t, best_f1


def _score_curve(
    scores: np.ndarray,
    x_weights: np.ndarray,
    y_weights: np.ndarray,
    cap: int | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (x, y) curve points over strict-> thresholds, high to low.

    Points sit at every unique pooled score (thinned to rank quantiles above
    ``cap``), plus the empty prediction (0, 0) and the all-positive end.
    """
    order = np.argsort(-scores, kind="stable")
    cum_x = np.concatenate([[0.0], np.cumsum(x_weights[order])])
    cum_y = np.concatenate([[0.0], np.cumsum(y_weights[order])])
    s_asc = scores[order][::-1]
    thresholds = np.unique(scores)
    if cap is not None and thresholds.size > cap:
        levels = np.linspace(0.0, 1.0, cap)
        thresholds = np.unique(np.quantile(scores, levels, method="lower"))
    ks = scores.size - np.searchsorted(s_asc, thresholds, side="right")
    ks = np.unique(np.concatenate([ks, [0, scores.size]]))
    return cum_x[ks], cum_y[ks]


def _area_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under y(x) for x in [0, limit], normalized by limit.

    The curve is anchored exactly at x = limit by linear interpolation.
    """
    i = int(np.searchsorted(x, limit, side="left"))
    if i >= x.size:
        xs, ys = x, y
    elif x[i] == limit:
        xs, ys = x[: i + 1], y[: i + 1]
    else:
        frac = (limit - x[i - 1]) / (x[i] - x[i - 1])
        xs = np.concatenate([x[:i], [limit]])
        ys = np.concatenate([y[:i], [y[i - 1] + frac * (y[i] - y[i - 1])]])
    return float(np.trapezoid(ys, xs)) / limit


def auroc_fpr_limit(
    scores: Sequence[np.ndarray], gts: Sequence[np.ndarray], limit: float = 0.05
) -> float:
    """Pixel ROC area restricted to FPR in [0, limit], normalized by limit."""
    if not 0.0 < limit <= 1.0:
        raise ValueError(f"limit must be in (0, 1], got {limit}")
    _validate_pairs(scores, gts)
    pooled = np.concatenate([np.asarray(m).ravel().astype(np.float64) for m in scores])
    labels = np.concatenate([np.asarray(g, dtype=bool).ravel() for g in gts])
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC undefined: needs both classes in the ground truth")
    x, y = _score_curve(
        pooled, (~labels).astype(np.int64), labels.astype(np.int64), cap=None
    )
    return _area_to_limit(x / n_neg, y / n_pos, limit)


def aupro_fpr_limit(
    maps: Sequence[np.ndarray], gts: Sequence[np.ndarray], limit: float = 0.05
) -> float:
    """Per-region-overlap area restricted to FPR in [0, limit], normalized.

    Ground truth splits into 8-connected components per image; at each
    threshold the overlap fraction is averaged over components while the
    FPR pools all negative pixels.
    """
    if not 0.0 < limit <= 1.0:
        raise ValueError(f"limit must be in (0, 1], got {limit}")
    _validate_pairs(maps, gts)
    gts = [np.asarray(g, dtype=bool) for g in gts]
    labeled = [ndimage.label(g, structure=_EIGHT_CONNECTED) for g in gts]
    n_components = sum(n for _, n in labeled)
    if n_components == 0:
        raise UndefinedMetricError("PRO undefined: ground truth has no anomaly region")
    n_neg = sum(int((~g).sum()) for g in gts)
    if n_neg == 0:
        raise UndefinedMetricError("PRO undefined: ground truth has no negative pixel")

    scores_parts, overlap_parts, neg_parts = [], [], []
    for (labels, _), m, g in zip(labeled, maps, gts):
        flat = labels.ravel()
        sizes = np.bincount(flat)
        weights = np.zeros(flat.size)
        inside = flat > 0
        weights[inside] = 1.0 / (n_components * sizes[flat[inside]])
        overlap_parts.append(weights)
        scores_parts.append(np.asarray(m).ravel().astype(np.float64))
        neg_parts.append((~g).ravel().astype(np.int64))
    x, y = _score_curve(
        np.concatenate(scores_parts),
        np.concatenate(neg_parts),
        np.concatenate(overlap_parts),
        cap=PRO_CURVE_CAP,
    )
    return _area_to_limit(x / n_neg, y, limit)


def class_f1(image_scores: Sequence[float], labels: Sequence[bool], threshold: float) -> float:
    """Image-level F1 with anomalous as the positive class (score > threshold)."""
    scores = np.asarray(image_scores, dtype=np.float64)
    truth = np.asarray(labels, dtype=bool)
    if scores.shape != truth.shape:
        raise ValidationError(f"scores shape {scores.shape} != labels shape {truth.shape}")
    if scores.size == 0:
        return 0.0
    pred = scores > threshold
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    return _f1_from_counts(tp, fp, fn)


def best_image_threshold(
    image_scores: Sequence[float], labels: Sequence[bool]
) -> tuple[float, float]:
    """Image-score threshold maximizing image-level F1 (same sweep rule)."""
    scores = np.asarray(image_scores, dtype=np.float64)
    truth = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise UndefinedMetricError("no image scores")
    if not truth.any():
        raise UndefinedMetricError("image threshold undefined: no anomalous image")
    return _best_threshold_flat(scores, truth)


def save_report(result: EvalResult, path: str | os.PathLike) -> None:
    """JSON report with stable key order."""
    payload = json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, payload.encode("utf-8"))


def load_report(path: str | os.PathLike) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def summary_csv(results: Sequence[EvalResult]) -> str:
    """CSV with one row per category plus an arithmetic-mean row."""
    lines = [",".join(CSV_COLUMNS)]
    for r in results:
        lines.append(",".join(r.csv_row()))
    if results:
        means = [
            float(np.mean([r.pixel_f1 for r in results])),
            float(np.mean([r.precision for r in results])),
            float(np.mean([r.recall for r in results])),
            float(np.mean([r.auroc_limit for r in results])),
            float(np.mean([r.aupro_limit for r in results])),
            float(np.mean([r.class_f1 for r in results])),
        ]
        lines.append(",".join(["mean"] + [repr(v) for v in means] + ["", ""]))
    return "\n".join(lines) + "\n"
