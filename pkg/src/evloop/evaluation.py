"""Classification metrics and FROC lesion-localisation scoring."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateError, UndefinedROCError

# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass
class OperatingPoint:
    sensitivity: float
    specificity: float
    threshold: float


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    optimal: OperatingPoint


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedROCError("ROC needs both positive and negative labels")
    return scores, labels


def _sweep(scores, labels):
    """Counts of (tp, fp) when predicting positive for score >= each
    unique score, highest first."""
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    uniq_last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(lab)[uniq_last]
    fp = np.cumsum(~lab)[uniq_last]
    return s[uniq_last], tp, fp


def _best_cut(scores, labels):
    """Index into the unique-score sweep of the operating point closest
    to (FPR, TPR) = (0, 1), among cuts that fall between two scores.

    Distances are compared exactly in integers; ties go to the higher
    sensitivity.
    """
    uniq, tp, fp = _sweep(scores, labels)
    if uniq.size < 2:
        raise UndefinedROCError("all scores are identical; no threshold separates them")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    best, best_key = None, None
    for i in range(uniq.size - 1):
        d2 = (n_pos - int(tp[i])) ** 2 * n_neg ** 2 + int(fp[i]) ** 2 * n_pos ** 2
        key = (d2, -int(tp[i]))
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best, uniq, tp, fp, n_pos, n_neg


def select_threshold(scores, labels) -> float:
    """Referability threshold at the ROC point nearest the top-left corner.

    The returned value is the midpoint of the gap between the two
    scores that straddle the optimal cut; ``score >= threshold`` then
    reproduces that operating point.
    """
    scores, labels = _check_binary(scores, labels)
    i, uniq, *_ = _best_cut(scores, labels)
    return float((uniq[i] + uniq[i + 1]) / 2)


def roc(scores, labels) -> RocCurve:
    scores, labels = _check_binary(scores, labels)
    uniq, tp, fp = _sweep(scores, labels)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    # trapezoids in integer counts so the only rounding is the final division
    tpi, fpi = np.r_[0, tp].astype(object), np.r_[0, fp].astype(object)
    area2 = int(np.sum((fpi[1:] - fpi[:-1]) * (tpi[1:] + tpi[:-1])))
    auc = area2 / (2 * int(n_pos) * int(n_neg))
    if uniq.size >= 2:
        i, *_ = _best_cut(scores, labels)
        th = float((uniq[i] + uniq[i + 1]) / 2)
        opt = OperatingPoint(float(tp[i] / n_pos), float(1 - fp[i] / n_neg), th)
    else:
        opt = OperatingPoint(1.0, 0.0, float(uniq[0]))
    return RocCurve(fpr, tpr, np.r_[np.inf, uniq], auc, opt)


def sensitivity_specificity(scores, labels, threshold):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    se = float((pred & labels).sum() / max(labels.sum(), 1))
    sp = float((~pred & ~labels).sum() / max((~labels).sum(), 1))
    return se, sp


# ---------------------------------------------------------------------------
# Kappa
# ---------------------------------------------------------------------------


def confusion_matrix(true, pred, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(np.asarray(true, int), np.asarray(pred, int)):
        cm[t, p] += 1
    return cm


def quadratic_weighted_kappa(confusion) -> float:
    """Cohen's kappa with quadratic disagreement weights."""
    o = np.asarray(confusion, dtype=np.float64)
    if o.ndim != 2 or o.shape[0] != o.shape[1] or o.shape[0] < 2:
        raise ValueError("confusion matrix must be K x K with K >= 2")
    total = o.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    k = o.shape[0]
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    expected = np.outer(o.sum(axis=1), o.sum(axis=0)) / total
    denom = (w * expected).sum()
    if denom == 0:
        raise DegenerateError("kappa undefined: no expected disagreement")
    return float(1.0 - (w * o).sum() / denom)


def grade_from_prediction(pred, k=4):
    return np.clip(np.rint(np.asarray(pred, dtype=np.float64)), 0, k - 1).astype(int)


# ---------------------------------------------------------------------------
# FROC
# ---------------------------------------------------------------------------

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class LesionReference:
    """Individual lesions of one type in one image (4-connected components)."""

    labels: np.ndarray
    count: int

    @classmethod
    def from_mask(cls, mask):
        labels, n = ndimage.label(np.asarray(mask, bool), structure=FOUR_CONNECTED)
        return cls(labels, int(n))


@dataclass(frozen=True)
class Detection:
    row: int
    col: int
    confidence: float
    true_positive: bool
    hits: int


def detection_radius(size, percent):
    """Radius in pixels for a percentage of the image dimension, rounded half up."""
    return int(math.floor(size * percent / 100.0 + 0.5))


def froc_per_image(explanation, reference: LesionReference, r, max_detections=200):
    """Greedy peak picking on a map against one image's lesions.

    Repeatedly take the global maximum (first in row-major order on
    ties), score it against lesions within distance ``r``, and blank the
    detection disc.  Stops when the map has no positive value left or
    ``max_detections`` is reached.
    """
    m = np.array(explanation, dtype=np.float64)
    if m.shape != reference.labels.shape:
        raise ValueError(f"map {m.shape} and reference {reference.labels.shape} differ in shape")
    if r < 1:
        raise ValueError("detection radius must be >= 1")
    h, w = m.shape
    yy, xx = np.mgrid[:h, :w]
    detected = np.zeros(reference.count + 1, bool)
    out = []
    ri = int(math.ceil(r))
    while len(out) < max_detections:
        idx = int(np.argmax(m))
        conf = m.flat[idx]
        if not conf > 0:
            break
        y, x = divmod(idx, w)
        y0, y1, x0, x1 = max(y - ri, 0), min(y + ri + 1, h), max(x - ri, 0), min(x + ri + 1, w)
        disc = (yy[y0:y1, x0:x1] - y) ** 2 + (xx[y0:y1, x0:x1] - x) ** 2 <= r * r
        ids = np.unique(reference.labels[y0:y1, x0:x1][disc])
        fresh = [i for i in ids if i > 0 and not detected[i]]
        detected[fresh] = True
        out.append(Detection(y, x, float(conf), bool(fresh), len(fresh)))
        m[y0:y1, x0:x1][disc] = 0.0
    return out


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    avg_fp: np.ndarray
    sensitivity: np.ndarray
    se_at_10fp: float
    radius: float = 0.0
    n_images: int = 0
    n_lesions: int = 0
    detections: list = field(default_factory=list, repr=False)

    def sensitivity_at(self, fp_rate):
        return _interp_sensitivity(self.avg_fp, self.sensitivity, fp_rate)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["threshold", "avg_fp_per_image", "sensitivity"])
            for t, f, s in zip(self.thresholds, self.avg_fp, self.sensitivity):
                wr.writerow([repr(float(t)), repr(float(f)), repr(float(s))])

    def summary(self):
        return {"se_at_10fp": self.se_at_10fp, "r": self.radius,
                "n_images": self.n_images, "n_lesions": self.n_lesions}

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def _interp_sensitivity(avg_fp, sens, target):
    """Linear interpolation of the curve at ``avg_fp == target``; the
    final sensitivity if the curve stops short of ``target``."""
    if avg_fp[-1] <= target:
        return float(sens[-1])
    j = int(np.searchsorted(avg_fp, target, side="right"))  # first point past target
    i = j - 1
    if avg_fp[j] == avg_fp[i]:
        return float(sens[i])
    frac = (target - avg_fp[i]) / (avg_fp[j] - avg_fp[i])
    return float(sens[i] + frac * (sens[j] - sens[i]))


def froc_aggregate(detections_per_image, lesions_per_image, fp_rate=10.0, radius=0.0,
                   per_image=False) -> FrocCurve:
    """Sweep detection confidences over a corpus.

    Sensitivity is pooled over lesions (hits / all lesions) unless
    ``per_image`` is set, in which case it is the mean of per-image
    sensitivities over images that contain lesions.
    """
    n_images = len(detections_per_image)
    if n_images == 0:
        raise ValueError("need at least one image")
    lesions = np.asarray(lesions_per_image, dtype=np.int64)
    total = int(lesions.sum())
    if total == 0:
        raise DegenerateError("no reference lesions; sensitivity undefined")
    flat = [(d.confidence, img, d) for img, dets in enumerate(detections_per_image) for d in dets]
    flat.sort(key=lambda t: -t[0])
    confs = np.array([c for c, _, _ in flat])
    fps = np.cumsum([not d.true_positive for _, _, d in flat]) if flat else np.zeros(0)
    if per_image:
        with_lesions = lesions > 0
        contrib = np.array([d.hits / lesions[img] if lesions[img] else 0.0 for _, img, d in flat])
        sens_steps = np.cumsum(contrib) / with_lesions.sum()
    else:
        sens_steps = np.cumsum([d.hits for _, _, d in flat]) / total
    last = np.r_[confs[1:] != confs[:-1], True] if flat else np.zeros(0, bool)
    thresholds = np.r_[np.inf, confs[last]]
    avg_fp = np.r_[0.0, fps[last] / n_images]
    sens = np.r_[0.0, sens_steps[last]]
    return FrocCurve(thresholds, avg_fp, sens, _interp_sensitivity(avg_fp, sens, fp_rate),
                     radius, n_images, total, list(detections_per_image))
