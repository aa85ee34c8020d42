"""Mask paste-back, IoU, boundary error and the rank-free AP summary."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

_SQUARE = np.ones((3, 3), dtype=bool)


def paste_mask(mask: np.ndarray, box, image_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour inverse of the RoI mapping: (M, M) mask -> (H, W) image mask."""
    h, w = image_size
    m = mask.shape[0]
    x0, y0, x1, y1 = box
    out = np.zeros((h, w), dtype=np.uint8)
    cy = np.arange(h) + 0.5
    cx = np.arange(w) + 0.5
    ry = (cy >= y0) & (cy < y1)
    rx = (cx >= x0) & (cx < x1)
    if not ry.any() or not rx.any():
        return out
    iy = np.clip(np.floor((cy[ry] - y0) / (y1 - y0) * m).astype(int), 0, m - 1)
    ix = np.clip(np.floor((cx[rx] - x0) / (x1 - x0) * m).astype(int), 0, m - 1)
    out[np.ix_(ry, rx)] = mask[np.ix_(iy, ix)]
    return out


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def boundary_band(gt: np.ndarray, width: int = 2) -> np.ndarray:
    g = gt.astype(bool)
    outer = binary_dilation(g, _SQUARE, iterations=width)
    inner = binary_erosion(g, _SQUARE, iterations=width, border_value=0)
    return outer & ~inner


def boundary_error(pred: np.ndarray, gt: np.ndarray, width: int = 2) -> float:
    """Fraction of pixels within ``width`` px of the GT boundary that are misclassified."""
    band = boundary_band(gt, width)
    if not band.any():
        return 0.0
    return float((pred.astype(bool) != gt.astype(bool))[band].mean())


@dataclass
class EvalReport:
    mean_iou: float
    ap50: float
    ap75: float
    boundary_error: float
    per_scene: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "boundary_error": self.boundary_error,
            "n_instances": len(self.per_scene),
        }


def score_masks(predictions, scenes) -> EvalReport:
    """Score image-space predicted masks, ``predictions[s][i]`` for instance ``i`` of scene ``s``."""
    if not scenes:
        raise ValueError("empty evaluation set")
    rows = []
    for preds, scene in zip(predictions, scenes, strict=True):
        for i, (pred, inst) in enumerate(zip(preds, scene.instances, strict=True)):
            rows.append(
                {
                    "scene_seed": scene.seed,
                    "instance": i,
                    "iou": iou(pred, inst.mask),
                    "boundary_error": boundary_error(pred, inst.mask),
                }
            )
    ious = np.array([r["iou"] for r in rows])
    return EvalReport(
        mean_iou=float(ious.mean()),
        ap50=float((ious >= 0.5).mean()),
        ap75=float((ious >= 0.75).mean()),
        boundary_error=float(np.mean([r["boundary_error"] for r in rows])),
        per_scene=rows,
    )
