"""Calibration and accuracy metrics.

Calibration scores are computed per image and then averaged over images.
Regression uses ten central Gaussian intervals at levels 0.1, ..., 1.0 and
weighs the levels uniformly; classification bins pixels by confidence into
ten equal-width bins and weighs each bin's gap by its share of pixels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DomainError, ShapeMismatch

LEVELS = np.arange(1, 11) / 10.0


@dataclass
class CalibrationCurve:
    expected: np.ndarray
    observed: np.ndarray
    score: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("level", "observed"))
            for e, o in zip(self.expected, self.observed):
                w.writerow((repr(float(e)), repr(float(o))))


def read_curve_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def _as_images(a):
    a = np.asarray(a)
    return a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)


def regression_calibration(mean, var, truth, levels=LEVELS) -> CalibrationCurve:
    """Coverage of central Gaussian intervals.

    Arrays are (n_images, ...) with everything after the first axis counted
    as pixels of that image; a 1D array is a single image.  The returned
    curve is the mean over images of each image's coverage.
    """
    mean, var, truth = _as_images(mean).astype(float), _as_images(var).astype(float), _as_images(truth).astype(float)
    if not (mean.shape == var.shape == truth.shape):
        raise ShapeMismatch("mean, variance and truth must share a shape")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise DomainError("predictive variances must be finite and non-negative")
    levels = np.asarray(levels, dtype=float)
    half = norm.ppf(0.5 + levels / 2)                       # inf at level 1
    resid = np.abs(truth - mean)
    sd = np.sqrt(var)
    # half-width with inf * 0 = 0: a zero-variance interval holds only exact hits
    with np.errstate(invalid="ignore"):
        width = np.where(sd[None] > 0, half[:, None, None] * sd[None], 0.0)
    inside = resid[None] <= width
    per_image = inside.mean(axis=2)                          # (levels, images)
    scores = np.abs(per_image - levels[:, None]).mean(axis=0)
    return CalibrationCurve(levels, per_image.mean(axis=1), float(scores.mean()))


def _class_image_score(conf, correct, n_bins):
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    gap, acc, mean_conf = 0.0, np.full(n_bins, np.nan), np.full(n_bins, np.nan)
    for b in range(n_bins):
        sel = bins == b
        if not sel.any():
            continue
        acc[b], mean_conf[b] = correct[sel].mean(), conf[sel].mean()
        gap += sel.mean() * abs(acc[b] - mean_conf[b])
    return gap, acc, mean_conf


def classification_calibration(probs, labels, ignore_label: int | None = 255, n_bins: int = 10,
                               class_axis: int = 1) -> CalibrationCurve:
    """Confidence-binned calibration.

    ``probs`` is (n_images, K, ...) (class axis ``class_axis``) and
    ``labels`` (n_images, ...).  Pixels with ``ignore_label`` are dropped.
    Each image's score is the mass-weighted mean |accuracy - confidence|
    over its non-empty bins.  The curve reports bin centres against the
    pooled accuracy in each bin.
    """
    probs = np.moveaxis(np.asarray(probs, dtype=float), class_axis, -1)
    labels = np.asarray(labels)
    n = probs.shape[0]
    probs = probs.reshape(n, -1, probs.shape[-1])
    labels = labels.reshape(n, -1)
    if labels.shape != probs.shape[:2]:
        raise ShapeMismatch("labels must match the non-class axes of probs")
    scores, all_conf, all_correct = [], [], []
    for i in range(n):
        keep = labels[i] != ignore_label if ignore_label is not None else np.ones(labels.shape[1], bool)
        if not keep.any():
            continue
        p = probs[i][keep]
        conf = p.max(axis=1)
        correct = (p.argmax(axis=1) == labels[i][keep]).astype(float)
        scores.append(_class_image_score(conf, correct, n_bins)[0])
        all_conf.append(conf)
        all_correct.append(correct)
    if not scores:
        raise DomainError("no labelled pixels")
    _, acc, _ = _class_image_score(np.concatenate(all_conf), np.concatenate(all_correct), n_bins)
    centres = (np.arange(n_bins) + 0.5) / n_bins
    return CalibrationCurve(centres, acc, float(np.mean(scores)))


def regression_errors(pred, truth) -> dict:
    """rel and log10 use only pixels with positive truth (and positive prediction for log10)."""
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.shape != truth.shape:
        raise ShapeMismatch("prediction and truth sizes differ")
    pos = truth > 0
    both = pos & (pred > 0)
    rel = float(np.mean(np.abs(pred[pos] - truth[pos]) / truth[pos])) if pos.any() else float("nan")
    lg = float(np.mean(np.abs(np.log10(pred[both]) - np.log10(truth[both])))) if both.any() else float("nan")
    return {"rel": rel, "log10": lg, "rms": float(np.sqrt(np.mean((pred - truth) ** 2)))}


def seg_scores(pred, truth, n_classes: int, ignore_class: int | None = 255) -> dict:
    """Mean IoU over classes present in prediction or truth, and pixel accuracy."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    keep = truth != ignore_class if ignore_class is not None else np.ones(truth.shape, bool)
    pred, truth = pred[keep], truth[keep]
    ious = []
    for k in range(n_classes):
        inter = np.sum((pred == k) & (truth == k))
        union = np.sum((pred == k) | (truth == k))
        if union:
            ious.append(inter / union)
    return {"mean_iou": float(np.mean(ious)) if ious else float("nan"),
            "accuracy": float(np.mean(pred == truth)) if truth.size else float("nan"),
            "per_class_iou": ious}
