"""Segmentation quality metrics and dataset-level aggregation.

DSC, IoU and MAE are direct. The weighted F-measure, S-measure and
E-measure follow their original definitions (Margolin et al. 2014; Fan et al.
2017; Fan et al. 2018) with the usual reference constants: a 7x7 Gaussian
with sigma 5 and beta^2 = 1, alpha = 0.5, and 256 thresholds.

Degenerate cases:

* DSC and IoU are 1 when prediction and ground truth are both empty.
* F_beta^w on an empty ground truth is 1 for an empty prediction, else 0.
* S_alpha on an all-background (all-foreground) ground truth is
  ``1 - mean(pred)`` (``mean(pred)``).
* E_phi on a constant ground truth scores the fraction of pixels agreeing
  with it at each threshold, so a constant-0 prediction of an empty mask is 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError

EPS = np.finfo(np.float64).eps
FW_SIGMA = 5.0
FW_KERNEL = 7
FW_BETA2 = 1.0
S_ALPHA = 0.5
E_THRESHOLDS = 256
THRESHOLD = 0.5

METRIC_NAMES = ("dsc", "miou", "f_beta_w", "s_alpha", "e_phi_max", "mae")


def _pair(pred, gt, what: str) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"{what}: prediction {p.shape} vs ground truth {g.shape}")
    return p, g.astype(bool)


def binarize(pred, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64) >= threshold


def dsc(pred, gt) -> float:
    p, g = _pair(pred, gt, "dsc")
    p = binarize(p)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / denom


def miou(pred, gt) -> float:
    p, g = _pair(pred, gt, "miou")
    p = binarize(p)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, g).sum() / union


def mae(pred, gt) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"mae: prediction {p.shape} vs ground truth {g.shape}")
    return float(np.mean(np.abs(p - g)))


# ---------------------------------------------------------------------------
# weighted F-measure


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    # MATLAB fspecial('gaussian')
    m = (size - 1) / 2
    y, x = np.ogrid[-m : m + 1, -m : m + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def f_beta_w(pred, gt) -> float:
    p, g = _pair(pred, gt, "f_beta_w")
    if not g.any():
        return 1.0 if not (p > 0).any() else 0.0
    err = np.abs(p - g)
    # background errors are taken from the nearest foreground pixel
    dist, (iy, ix) = ndimage.distance_transform_edt(~g, return_indices=True)
    err_t = err.copy()
    bg = ~g
    err_t[bg] = err[iy[bg], ix[bg]]
    smoothed = ndimage.convolve(err_t, _gauss_kernel(FW_KERNEL, FW_SIGMA), mode="constant", cval=0.0)
    min_err = np.where(g & (smoothed < err), smoothed, err)
    # background pixels far from the object count up to twice as much
    importance = np.where(bg, 2.0 - np.exp(np.log(0.5) / 5.0 * dist), 1.0)
    ew = min_err * importance
    tp = g.sum() - ew[g].sum()
    fp = ew[bg].sum()
    recall = 1.0 - ew[g].mean()
    precision = tp / (tp + fp + EPS)
    return float((1 + FW_BETA2) * recall * precision / (recall + FW_BETA2 * precision + EPS))


# ---------------------------------------------------------------------------
# S-measure


def _s_object(x: np.ndarray, mask: np.ndarray) -> float:
    vals = x[mask]
    if vals.size == 0:
        return 0.0
    mu = vals.mean()
    sd = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sd + EPS)


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    d = max(n - 1, 1)
    sx = ((p - x) ** 2).sum() / d
    sy = ((g - y) ** 2).sum() / d
    sxy = ((p - x) * (g - y)).sum() / d
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def s_alpha(pred, gt) -> float:
    p, g = _pair(pred, gt, "s_alpha")
    mu = g.mean()
    if mu == 0:
        return float(1.0 - p.mean())
    if mu == 1:
        return float(p.mean())
    gf = g.astype(np.float64)
    obj = mu * _s_object(p * gf, g) + (1 - mu) * _s_object((1 - p) * (1 - gf), ~g)

    h, w = g.shape
    ys, xs = np.nonzero(g)
    cx = int(np.round(xs.mean())) + 1
    cy = int(np.round(ys.mean())) + 1
    area = h * w
    w1 = cx * cy / area
    w2 = cy * (w - cx) / area
    w3 = (h - cy) * cx / area
    w4 = 1 - w1 - w2 - w3
    quads = [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
             (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]
    region = sum(wt * _ssim(p[q], gf[q]) for wt, q in zip((w1, w2, w3, w4), quads))
    return float(max(0.0, S_ALPHA * obj + (1 - S_ALPHA) * region))


# ---------------------------------------------------------------------------
# E-measure


def e_phi_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment score at each of 256 thresholds on the 8-bit prediction."""
    p, g = _pair(pred, gt, "e_phi")
    q = np.clip(p * 255, 0, 255).astype(np.uint8)
    size = g.size
    gt_fg = int(g.sum())
    bins = np.arange(E_THRESHOLDS + 1)
    # counts of pixels with q >= t, for t = 0..255
    fg_hist = np.histogram(q[g], bins=bins)[0]
    bg_hist = np.histogram(q[~g], bins=bins)[0]
    tp = np.cumsum(fg_hist[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1].astype(np.float64)
    pred_fg = tp + fp
    pred_bg = size - pred_fg
    if gt_fg == 0:
        total = pred_bg
    elif gt_fg == size:
        total = pred_fg
    else:
        fn = gt_fg - tp
        tn = pred_bg - fn
        mean_p = pred_fg / size
        mean_g = gt_fg / size
        total = np.zeros(E_THRESHOLDS)
        for count, a, b in (
            (tp, 1 - mean_p, 1 - mean_g),
            (fp, 1 - mean_p, -mean_g),
            (fn, -mean_p, 1 - mean_g),
            (tn, -mean_p, -mean_g),
        ):
            align = 2 * a * b / (a * a + b * b + EPS)
            total += count * (align + 1) ** 2 / 4
    return total / size


def e_phi_max(pred, gt) -> float:
    return float(e_phi_curve(pred, gt).max())


# ---------------------------------------------------------------------------
# aggregation


def sample_metrics(prob, gt) -> dict[str, float]:
    p = np.asarray(prob, dtype=np.float64)
    g = np.asarray(gt)
    return {
        "dsc": float(dsc(p, g)),
        "miou": float(miou(p, g)),
        "f_beta_w": f_beta_w(p, g),
        "s_alpha": s_alpha(p, g),
        "e_phi_max": e_phi_max(p, g),
        "mae": mae(p, g),
    }


@dataclass
class MetricReport:
    dsc: float
    miou: float
    f_beta_w: float
    s_alpha: float
    e_phi_max: float
    mae: float
    ids: list[str] = field(default_factory=list)
    rows: list[dict[str, float]] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def write(self, path: str | Path, delimiter: str = "\t") -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            out.writerow(("id",) + METRIC_NAMES)
            for sid, row in zip(self.ids, self.rows):
                out.writerow([sid] + [repr(row[k]) for k in METRIC_NAMES])
            out.writerow(["mean"] + [repr(getattr(self, k)) for k in METRIC_NAMES])


def evaluate_dataset(probs: Sequence, gts: Sequence, ids: Sequence[str] | None = None) -> MetricReport:
    """Per-sample metrics of 2-D probability maps against 2-D masks, and their means."""
    if len(probs) != len(gts):
        raise ContractError(f"{len(probs)} predictions for {len(gts)} ground truths")
    if len(probs) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    ids = [str(i) for i in range(len(probs))] if ids is None else [str(i) for i in ids]
    if len(ids) != len(probs):
        raise ContractError("ids must align with predictions")
    rows = [sample_metrics(p, g) for p, g in zip(probs, gts)]
    means = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    return MetricReport(**means, ids=ids, rows=rows)
