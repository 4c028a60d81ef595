"""Depth and image quality metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .imagecore import as_image
from .losses import ssim

DEPTH_METRICS = ("abs_rel", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class DepthEvalConfig:
    """Valid pixels are ``gt > 0`` inside ``[min_eval, max_eval]``."""

    min_eval: float = 1e-3
    max_eval: float = 1e3
    median_scaling: bool = True

    def __post_init__(self):
        if not self.min_eval < self.max_eval:
            raise ValueError("min_eval must be below max_eval")


def depth_metrics(pred, gt, cfg=None):
    """Abs Rel, RMSE log and the three threshold accuracies over valid GT.

    With median scaling the prediction is first multiplied by
    ``median(gt) / median(pred)`` over the valid set.  Predictions are then
    clamped to the evaluation range.
    """
    cfg = cfg or DepthEvalConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = (gt > 0) & (gt >= cfg.min_eval) & (gt <= cfg.max_eval)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels")
    g = gt[valid]
    p = pred[valid]
    if cfg.median_scaling:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, cfg.min_eval, cfg.max_eval)
    ratio = np.maximum(g / p, p / g)
    return {
        "abs_rel": float(np.mean(np.abs(g - p) / g)),
        "rmse_log": float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
    }


def psnr(a, b):
    """Peak signal-to-noise ratio for ``[0, 1]`` images; ``inf`` if identical."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim_mean(a, b):
    return float(ssim(a, b).mean())


def write_metrics_csv(path, rows, columns):
    """One row per frame plus an aggregate ``mean`` row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", *columns])
        for name, vals in rows:
            w.writerow([name, *(repr(float(vals[c])) for c in columns)])
        if rows:
            agg = {c: np.mean([vals[c] for _, vals in rows]) for c in columns}
            w.writerow(["mean", *(repr(float(agg[c])) for c in columns)])
