"""Adaptive-threshold mask head: probability and threshold branches with fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .binarization import hard_binarize, hard_binarize_map, soft_binarize
from .config import HeadConfig
from .pyramid import apply_conv, conv_params
from .tensor import Tensor


@dataclass
class HeadActivations:
    f_p: Tensor  # probability features after the conv stack (and T2P fusion if on)
    f_t: Tensor | None  # threshold features after the conv stack (and P2T fusion if on)
    f_b: Tensor | None  # Concat(F_P, F_T)


@dataclass
class HeadOutput:
    prob: Tensor  # (R, 1, M, M)
    thresh: Tensor | None
    soft: Tensor | None
    activations: HeadActivations


def init_head(cfg: HeadConfig, in_channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate()
    c = cfg.channels
    params: dict[str, Tensor] = {}
    cin = in_channels
    for i in range(cfg.conv_stack_len):
        params.update(conv_params(rng, f"head.p{i}", cin, c, 3))
        cin = c
    params.update(conv_params(rng, "head.p_pred", c, 1, 1))
    if cfg.threshold_branch:
        params.update(conv_params(rng, "head.t_roi", in_channels, in_channels, 3))
        cin = in_channels
        for i in range(cfg.conv_stack_len):
            params.update(conv_params(rng, f"head.t{i}", cin, c, 3))
            cin = c
        params.update(conv_params(rng, "head.t_pred", c, 1, 1))
    if cfg.p2t:
        params.update(conv_params(rng, "head.p2t", 2 * c, c, 1))
    if cfg.t2p:
        params.update(conv_params(rng, "head.t2p", 2 * c, c, 1))
    return params


def head_param_count(cfg: HeadConfig, in_channels: int) -> int:
    """Closed-form parameter count for a head configuration."""
    c, n = cfg.channels, cfg.conv_stack_len
    trunk = (9 * in_channels * c + c) + (n - 1) * (9 * c * c + c)
    pred = c + 1
    total = trunk + pred
    if cfg.threshold_branch:
        total += (9 * in_channels * in_channels + in_channels) + trunk + pred
    fusion = 2 * c * c + c
    total += fusion * (int(cfg.p2t) + int(cfg.t2p))
    return total


def _trunk(params, prefix: str, x: Tensor, n: int) -> Tensor:
    for i in range(n):
        x = T.relu(apply_conv(params, f"{prefix}{i}", x))
    return x


def _predict(params, name: str, feat: Tensor) -> Tensor:
    return T.sigmoid(apply_conv(params, name, T.upsample_bilinear(feat, 2)))


def head_forward(r_p: Tensor, r_t: Tensor | None, cfg: HeadConfig, params: dict[str, Tensor]) -> HeadOutput:
    """RoI features (R, C, S, S) -> probability, threshold and soft binary maps (R, 1, 2S, 2S).

    Fusions act on post-trunk features: P2T first, then T2P consumes the fused
    threshold features. Each fusion is concat followed by a 1x1 projection
    back to ``cfg.channels`` and a ReLU.
    """
    f_p = _trunk(params, "head.p", r_p, cfg.conv_stack_len)
    if not cfg.threshold_branch:
        return HeadOutput(_predict(params, "head.p_pred", f_p), None, None, HeadActivations(f_p, None, None))
    if r_t is None:
        raise ValueError("threshold branch enabled but no threshold RoI features given")
    if r_t.shape[0] != r_p.shape[0] or r_t.shape[2:] != r_p.shape[2:]:
        raise T.ShapeError(f"r_p {r_p.shape} and r_t {r_t.shape} are not spatially aligned")
    f_t = _trunk(params, "head.t", r_t, cfg.conv_stack_len)
    if cfg.p2t:
        f_t = T.relu(apply_conv(params, "head.p2t", T.concat_channels(f_t, f_p)))
    if cfg.t2p:
        f_p = T.relu(apply_conv(params, "head.t2p", T.concat_channels(f_p, f_t)))
    prob = _predict(params, "head.p_pred", f_p)
    thresh = _predict(params, "head.t_pred", f_t)
    soft = soft_binarize(prob, thresh, cfg.k)
    return HeadOutput(prob, thresh, soft, HeadActivations(f_p, f_t, T.concat_channels(f_p, f_t)))


def binarize_output(out: HeadOutput, cfg: HeadConfig) -> np.ndarray:
    """Deployed masks (R, M, M): ``P >= T`` with the threshold branch, else ``P >= fixed``."""
    prob = out.prob.data[:, 0]
    if out.thresh is None:
        return hard_binarize(prob, cfg.fixed_threshold)
    return hard_binarize_map(prob, out.thresh.data[:, 0])


def head_infer(r_p: Tensor, r_t: Tensor | None, cfg: HeadConfig, params: dict[str, Tensor]) -> np.ndarray:
    with T.no_grad():
        return binarize_output(head_forward(r_p, r_t, cfg, params), cfg)
