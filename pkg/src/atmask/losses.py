"""BCE map losses, mask-target construction and the multi-task total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights
from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-12


@dataclass
class MaskTarget:
    gt_mask: np.ndarray  # (M, M) uint8
    gt_threshold_target: np.ndarray  # (M, M) uint8


def bce_map_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """``-[(1-y) log(1-p) + y log p]`` averaged (or summed) over pixels."""
    y = np.asarray(target, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction {pred.shape} and target {y.shape} differ")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("targets must be 0 or 1")
    one = T.as_tensor(np.ones_like(y))
    pos = T.mul(T.log(pred, LOG_FLOOR), T.as_tensor(y))
    neg = T.mul(T.log(T.sub(one, pred), LOG_FLOOR), T.as_tensor(1.0 - y))
    ll = T.add(pos, neg)
    if reduction == "sum":
        return T.scale(T.sum_all(ll), -1.0)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return T.scale(T.mean_all(ll), -1.0)


def _area_matrix(lo: float, hi: float, n_out: int, n_pix: int) -> np.ndarray:
    """(n_out, n_pix) fraction of each output cell covered by each unit pixel."""
    edges = lo + (hi - lo) * np.arange(n_out + 1) / n_out
    a, b = edges[:-1, None], edges[1:, None]
    px = np.arange(n_pix)[None, :]
    overlap = np.clip(np.minimum(b, px + 1) - np.maximum(a, px), 0.0, None)
    return overlap / (b - a)


def crop_resample(mask: np.ndarray, box, size: int) -> np.ndarray:
    """Area-average of ``mask`` over a ``size`` x ``size`` grid spanning ``box``."""
    x0, y0, x1, y1 = box
    h, w = mask.shape
    ay = _area_matrix(y0, y1, size, h)
    ax = _area_matrix(x0, x1, size, w)
    return ay @ mask.astype(np.float64) @ ax.T


def make_mask_target(scene, proposal, mask_size: int, threshold_target: str = "inverted") -> MaskTarget:
    inst = scene.instances[proposal.instance_id]
    frac = crop_resample(inst.mask, proposal.box, mask_size)
    if not np.any(frac > 0):
        raise ValueError(f"proposal {proposal.box} does not overlap instance {proposal.instance_id}")
    gt = (frac >= 0.5).astype(np.uint8)
    thr = (1 - gt) if threshold_target == "inverted" else gt.copy()
    return MaskTarget(gt, thr.astype(np.uint8))


def total_loss(l_p, l_t, l_b, w: LossWeights | None = None) -> Tensor:
    """Multi-task loss; the detection terms are fixed zero placeholders."""
    w = LossWeights() if w is None else w
    l_p, l_t, l_b = T.as_tensor(l_p), T.as_tensor(l_t), T.as_tensor(l_b)
    zero = T.as_tensor(np.zeros(l_p.shape))
    det = T.add(T.scale(zero, w.w_cls), T.scale(zero, w.w_box))
    return T.add(T.add(det, T.add(l_p, l_t)), T.scale(l_b, w.lambda_binary))
