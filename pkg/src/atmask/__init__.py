"""Adaptive-threshold instance mask head trained on synthetic scenes, with a numpy autodiff core."""

__version__ = "0.1.0"

from .binarization import hard_binarize, hard_binarize_map, soft_binarize  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .estimator import ATMaskSegmenter  # noqa: E402

__all__ = [
    "ATMaskSegmenter",
    "RunConfig",
    "hard_binarize",
    "hard_binarize_map",
    "load_config",
    "soft_binarize",
]
