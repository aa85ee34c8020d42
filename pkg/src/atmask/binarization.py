"""Hard and differentiable binarization of probability maps."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, scale, sigmoid, sub

DEFAULT_K = 2.0


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def hard_binarize(p, t: float) -> np.ndarray:
    """1 where ``p >= t`` (ties go to foreground), else 0."""
    return (_values(p) >= t).astype(np.uint8)


def hard_binarize_map(p, t) -> np.ndarray:
    """Per-pixel threshold: 1 where ``p >= t`` elementwise."""
    pv, tv = _values(p), _values(t)
    if pv.shape != tv.shape:
        raise ShapeError(f"probability map {pv.shape} and threshold map {tv.shape} differ")
    return (pv >= tv).astype(np.uint8)


def soft_binarize(p, t, k: float = DEFAULT_K) -> Tensor:
    """``1 / (1 + exp(-k (p - t)))``, recorded on the tape of ``p`` and ``t``."""
    if not k > 0:
        raise ValueError(f"steepness k must be positive, got {k}")
    p, t = as_tensor(p), as_tensor(t)
    if p.shape != t.shape:
        raise ShapeError(f"probability map {p.shape} and threshold map {t.shape} differ")
    return sigmoid(scale(sub(p, t), k))
