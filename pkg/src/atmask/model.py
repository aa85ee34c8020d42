"""Full model wiring: backbone pyramid -> RoI features -> mask head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import BackboneConfig, HeadConfig
from .head import HeadOutput, head_forward, init_head
from .pyramid import FeaturePyramid, build_pyramid, init_backbone, roi_extract
from .tensor import Tensor

Params = dict[str, Tensor]


def init_model(backbone: BackboneConfig, head: HeadConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params = init_backbone(backbone, rng)
    params.update(init_head(head, backbone.fpn_channels, rng))
    return params


def roi_features(pyr: FeaturePyramid, proposals, cfg: HeadConfig, params: Params):
    """(R_p, R_t) for a batch of proposals; R_t is None without a threshold branch."""
    r_p = roi_extract(pyr, proposals, cfg.roi_size, "by_size").values
    if not cfg.threshold_branch:
        return r_p, None
    adaptor = (params["head.t_roi.w"], params["head.t_roi.b"])
    r_t = roi_extract(pyr, proposals, cfg.roi_size, cfg.threshold_source, adaptor).values
    return r_p, r_t


def forward(params: Params, cfg: HeadConfig, images: np.ndarray, proposals) -> HeadOutput:
    """Images (N, 3, H, W) and proposals carrying ``batch_index`` -> head outputs."""
    pyr = build_pyramid(T.as_tensor(images), params)
    r_p, r_t = roi_features(pyr, proposals, cfg, params)
    return head_forward(r_p, r_t, cfg, params)
