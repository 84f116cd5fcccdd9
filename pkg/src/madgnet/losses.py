"""Sub-task ground truth and the deep-supervision multi-task loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigError, DimensionError
from .esdm import TASKS, TaskBundle
from .tensor import Tensor

REGION_POOL = 31
EDGE_WEIGHT = 5.0
IOU_SMOOTH = 1.0


# ---------------------------------------------------------------------------
# ground truth


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    return m.astype(bool) if m.dtype != bool else m


def _cross_shift_stack(m: np.ndarray) -> np.ndarray:
    """The mask and its four axis-neighbours, with zeros shifted in at the borders."""
    p = np.pad(m, 1)
    return np.stack([p[1:-1, 1:-1], p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]])


def derive_boundary(region) -> np.ndarray:
    """Inner morphological gradient with a 3x3 cross: the mask minus its erosion.

    Pixels outside the frame count as background, so a full mask keeps its border.
    """
    m = _binary(region)
    if m.ndim != 2:
        raise DimensionError(f"derive_boundary expects a 2-D mask, got shape {m.shape}")
    shifts = _cross_shift_stack(m)
    return (m & ~shifts.all(axis=0)).astype(np.float64)


def derive_distance(region) -> np.ndarray:
    """Euclidean distance to the nearest background pixel, scaled to max 1."""
    m = _binary(region)
    if m.ndim != 2:
        raise DimensionError(f"derive_distance expects a 2-D mask, got shape {m.shape}")
    if not m.any():
        return np.zeros(m.shape)
    if m.all():
        # no background inside the frame: measure to the surrounding ring
        d = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1]
    else:
        d = ndimage.distance_transform_edt(m)
    return d / d.max()


@dataclass
class GroundTruthSet:
    region: np.ndarray  # (N,1,H,W) in {0,1}
    boundary: np.ndarray
    distance: np.ndarray

    @classmethod
    def from_region(cls, region) -> "GroundTruthSet":
        r = np.asarray(region, dtype=np.float64)
        if r.ndim != 4 or r.shape[1] != 1:
            raise DimensionError(f"region masks must be (N,1,H,W), got {r.shape}")
        b = np.stack([derive_boundary(x[0])[None] for x in r])
        d = np.stack([derive_distance(x[0])[None] for x in r])
        return cls(r, b, d)

    def target(self, task: str) -> np.ndarray:
        return getattr(self, task)


# ---------------------------------------------------------------------------
# losses


def region_pool_size(h: int, w: int) -> int:
    """31, or the largest odd size that fits when the image is smaller."""
    k = min(REGION_POOL, h, w)
    return k if k % 2 else k - 1


def region_weights(g: np.ndarray) -> np.ndarray:
    """``1 + 5 |boxmean(g) - g|`` with zero padding counted in the mean."""
    g = np.asarray(g, dtype=np.float64)
    k = region_pool_size(*g.shape[2:])
    local = ndimage.uniform_filter(g, size=(1, 1, k, k), mode="constant", cval=0.0)
    return 1.0 + EDGE_WEIGHT * np.abs(local - g)


def _check_pair(logits: Tensor, g: np.ndarray, what: str) -> None:
    if logits.shape != np.shape(g):
        raise DimensionError(f"{what}: prediction {logits.shape} vs target {np.shape(g)}")


def _bce_with_logits(x: Tensor, g: np.ndarray) -> Tensor:
    return T.sub(T.softplus(x), T.mul(x, Tensor(g)))


def weighted_region_loss(logits: Tensor, g, weights: np.ndarray | None = None) -> Tensor:
    """Weighted BCE plus weighted soft IoU, averaged over the batch."""
    g = np.asarray(g, dtype=np.float64)
    _check_pair(logits, g, "weighted_region_loss")
    w = region_weights(g) if weights is None else np.asarray(weights, dtype=np.float64)
    n = logits.shape[0]
    wsum = w.sum(axis=(1, 2, 3), keepdims=True)
    wbce = T.div(T.sum_per_sample(T.mul(Tensor(w), _bce_with_logits(logits, g))), Tensor(wsum))
    p = T.sigmoid(logits)
    inter = T.sum_per_sample(T.mul(p, Tensor(w * g)))
    # p + g - p*g == p*(1-g) + g for constant g
    union = T.add(
        T.sum_per_sample(T.mul(p, Tensor(w * (1.0 - g)))),
        Tensor((w * g).sum(axis=(1, 2, 3), keepdims=True)),
    )
    ratio = T.div(T.affine(inter, 1.0, IOU_SMOOTH), T.affine(union, 1.0, IOU_SMOOTH))
    wiou = T.affine(ratio, -1.0, 1.0)
    return T.scale(T.sum_all(T.add(wbce, wiou)), 1.0 / n)


def boundary_loss(logits: Tensor, g) -> Tensor:
    g = np.asarray(g, dtype=np.float64)
    _check_pair(logits, g, "boundary_loss")
    return T.mean_all(_bce_with_logits(logits, g))


def distance_loss(logits: Tensor, g) -> Tensor:
    g = np.asarray(g, dtype=np.float64)
    _check_pair(logits, g, "distance_loss")
    return T.mean_all(T.square(T.sub(T.sigmoid(logits), Tensor(g))))


TASK_LOSSES = {"region": weighted_region_loss, "distance": distance_loss, "boundary": boundary_loss}
DEFAULT_LAMBDAS = {"region": 1.0, "distance": 1.0, "boundary": 1.0}


def total_loss(
    bundles: Sequence[TaskBundle],
    gts: GroundTruthSet,
    lambdas: Mapping[str, float] | None = None,
) -> Tensor:
    """Sum over the given stage bundles and tasks of ``lambda_t * L_t``."""
    lambdas = dict(DEFAULT_LAMBDAS if lambdas is None else lambdas)
    unknown = set(lambdas) - set(TASKS)
    if unknown:
        raise ConfigError(f"unknown task weights {sorted(unknown)}")
    total = None
    for bundle in bundles:
        for task in TASKS:
            lam = lambdas.get(task, 0.0)
            if lam == 0.0:
                continue
            pred = bundle.prediction(task)
            if pred is None:
                raise ConfigError(f"stage {bundle.stage} has no {task} head but lambda_{task}={lam}")
            term = TASK_LOSSES[task](pred, gts.target(task))
            if lam != 1.0:
                term = T.scale(term, lam)
            total = term if total is None else T.add(total, term)
    if total is None:
        raise ConfigError("no loss terms: every task weight is zero or no stages given")
    return total


def network_loss(
    outputs: Mapping[int, Sequence[TaskBundle]],
    gts: Sequence[GroundTruthSet],
    lambdas: Mapping[str, float] | None = None,
) -> Tensor:
    """Loss over every supervised stage and every label (``gts[m]`` for label m)."""
    total = None
    for m, gt in enumerate(gts):
        term = total_loss([outputs[i][m] for i in sorted(outputs)], gt, lambdas)
        total = term if total is None else T.add(total, term)
    return total
