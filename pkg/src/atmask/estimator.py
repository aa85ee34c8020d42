"""scikit-learn style wrapper around training, prediction and checkpoints."""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, set_dotted
from .metrics import EvalReport
from .synthetic import SyntheticScene
from .training import evaluate, predict_masks, predict_scene, train


def check_scenes(scenes) -> list[SyntheticScene]:
    """Validate a scene collection the way ``check_array`` validates a matrix."""
    if isinstance(scenes, SyntheticScene):
        scenes = [scenes]
    scenes = list(scenes)
    if not scenes:
        raise ValueError("expected at least one scene, got 0")
    for i, s in enumerate(scenes):
        if not isinstance(s, SyntheticScene):
            raise TypeError(f"item {i} is {type(s).__name__}, expected SyntheticScene")
        if s.image.ndim != 3 or s.image.shape[0] != 3:
            raise ValueError(f"scene {s.seed}: image must be (3, H, W), got {s.image.shape}")
        if not np.all(np.isfinite(s.image)):
            raise ValueError(f"scene {s.seed}: image contains non-finite values")
    return scenes


class ATMaskSegmenter(BaseEstimator):
    """Adaptive-threshold mask head trained on synthetic scenes.

    Parameters
    ----------
    config : RunConfig, optional
        Full run configuration; defaults are used when omitted.
    overrides : dict, optional
        Dotted ``section.field`` assignments applied on top of ``config``.

    Attributes
    ----------
    params_ : dict of Tensor
        Trained weights.
    config_ : RunConfig
        The resolved configuration used by ``fit``.
    loss_curve_ : list of tuple
        ``(step, total, prob, thresh, binary)`` per step.
    """

    def __init__(self, config: RunConfig | None = None, overrides: dict | None = None):
        self.config = config
        self.overrides = overrides

    def _resolve(self) -> RunConfig:
        cfg = copy.deepcopy(self.config) if self.config is not None else RunConfig()
        for key, value in (self.overrides or {}).items():
            set_dotted(cfg, key, value)
        return cfg.validate()

    def fit(self, X, y=None):
        """Train on scenes ``X``; masks come from the scenes, so ``y`` is ignored."""
        scenes = check_scenes(X)
        cfg = self._resolve()
        result = train(None, scenes, cfg)
        self.params_ = result.params
        self.config_ = cfg
        self.loss_curve_ = result.loss_curve
        self.n_params_ = int(sum(p.data.size for p in self.params_.values()))
        return self

    def predict(self, X) -> list[list[np.ndarray]]:
        """Image-space binary masks, one list per scene, one mask per instance."""
        check_is_fitted(self, "params_")
        return [predict_masks(self.params_, s, self.config_) for s in check_scenes(X)]

    def predict_maps(self, scene: SyntheticScene) -> dict[str, np.ndarray]:
        """RoI-space probability, threshold and soft binary maps for one scene."""
        check_is_fitted(self, "params_")
        out, _ = predict_scene(self.params_, check_scenes(scene)[0], self.config_)
        maps = {"prob": out.prob.data[:, 0]}
        if out.thresh is not None:
            maps["thresh"] = out.thresh.data[:, 0]
            maps["soft"] = out.soft.data[:, 0]
        return maps

    def evaluate(self, X) -> EvalReport:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_scenes(X), self.config_)

    def score(self, X, y=None) -> float:
        """Mean mask IoU over all instances of ``X``."""
        return self.evaluate(X).mean_iou

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, {"config": self.config_.to_dict()})

    @classmethod
    def load(cls, path: str | Path) -> "ATMaskSegmenter":
        params, meta = load_checkpoint(path)
        cfg = RunConfig.from_dict(meta.get("config", {})).validate()
        est = cls(config=cfg)
        est.params_ = params
        est.config_ = cfg
        est.loss_curve_ = []
        est.n_params_ = int(sum(p.data.size for p in params.values()))
        return est


def params_equal(a: dict[str, T.Tensor], b: dict[str, T.Tensor]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)
