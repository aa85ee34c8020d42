"""Central finite-difference gradient checks for every differentiable op.

Each case builds a scalar from named float64 arrays; the analytic gradient
from the tape is compared with central differences (h = 1e-6) using the
scale-relative error ``max|a - n| / max(max|a|, max|n|)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .binarization import soft_binarize
from .config import BackboneConfig, HeadConfig, LossWeights
from .head import head_forward, init_head
from .losses import bce_map_loss, total_loss
from .pyramid import RoIProposal, build_pyramid, init_backbone, roi_extract
from .tensor import Tensor

H = 1e-6
OP_TOL = 1e-5
E2E_TOL = 1e-4

Builder = Callable[[dict[str, Tensor]], Tensor]


@dataclass
class GradCheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_err <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def analytic_gradients(build: Builder, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    params = {k: T.parameter(v, name=k) for k, v in arrays.items()}
    T.backward(build(params))
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def numeric_gradient(
    build: Builder,
    arrays: dict[str, np.ndarray],
    name: str,
    h: float = H,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences for ``arrays[name]``; only flat indices ``coords`` if given."""
    base = arrays[name]
    flat_idx = np.arange(base.size) if coords is None else coords
    out = np.zeros(base.size)

    def f(arr):
        trial = dict(arrays)
        trial[name] = arr
        with T.no_grad():
            return build({k: T.as_tensor(v) for k, v in trial.items()}).item()

    for idx in flat_idx:
        plus, minus = base.copy().reshape(-1), base.copy().reshape(-1)
        plus[idx] += h
        minus[idx] -= h
        out[idx] = (f(plus.reshape(base.shape)) - f(minus.reshape(base.shape))) / (2 * h)
    return out.reshape(base.shape)


def check(
    name: str,
    build: Builder,
    arrays: dict[str, np.ndarray],
    tol: float = OP_TOL,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Worst relative error over all inputs; ``max_coords`` subsamples large arrays."""
    rng = np.random.default_rng(seed)
    grads = analytic_gradients(build, arrays)
    worst = 0.0
    for key, arr in arrays.items():
        coords = None
        if max_coords is not None and arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        num = numeric_gradient(build, arrays, key, coords=coords)
        ana = grads[key]
        if coords is not None:
            num, ana = num.reshape(-1)[coords], ana.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    return GradCheckResult(name, worst, tol)


def _projected(fn, out_shape, rng) -> Builder:
    """Reduce an op's output to a scalar with a fixed random projection."""
    weights = T.as_tensor(rng.normal(size=out_shape))

    def build(p):
        return T.sum_all(T.mul(fn(p), weights))

    return build


def op_cases(seed: int) -> list[tuple[str, Builder, dict[str, np.ndarray]]]:
    """Small random instances of every differentiable op, one set per seed."""
    rng = np.random.default_rng(seed)
    cases = []

    def add_case(name, fn, arrays):
        with T.no_grad():
            shape = fn({k: T.as_tensor(v) for k, v in arrays.items()}).shape
        cases.append((f"{name}[seed={seed}]", _projected(fn, shape, rng), arrays))

    for stride, pad, k, size in ((1, 1, 3, 8), (1, 0, 3, 7), (2, 0, 3, 9), (1, 0, 1, 5)):
        add_case(
            f"conv2d_s{stride}p{pad}k{k}",
            lambda p, s=stride, q=pad: T.conv2d(p["x"], p["w"], p["b"], s, q),
            {"x": rng.normal(size=(2, 3, size, size)), "w": rng.normal(size=(4, 3, k, k)), "b": rng.normal(size=4)},
        )
    add_case("sigmoid", lambda p: T.sigmoid(p["x"]), {"x": rng.normal(scale=3.0, size=(3, 5))})
    add_case("relu", lambda p: T.relu(p["x"]), {"x": _away_from_zero(rng, (4, 6))})
    add_case(
        "concat_channels",
        lambda p: T.concat_channels(p["a"], p["b"]),
        {"a": rng.normal(size=(2, 3, 4, 4)), "b": rng.normal(size=(2, 2, 4, 4))},
    )
    add_case("upsample_bilinear", lambda p: T.upsample_bilinear(p["x"], 2), {"x": rng.normal(size=(2, 2, 5, 4))})
    add_case("avgpool2", lambda p: T.avgpool2(p["x"]), {"x": rng.normal(size=(2, 2, 6, 4))})
    add_case("add", lambda p: T.add(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))})
    add_case("sub", lambda p: T.sub(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))})
    add_case("mul", lambda p: T.mul(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))})
    add_case("scale", lambda p: T.scale(p["x"], -1.7), {"x": rng.normal(size=(3, 4))})
    add_case("log", lambda p: T.log(p["x"], 1e-12), {"x": rng.uniform(0.1, 2.0, size=(3, 4))})
    add_case("mean_all", lambda p: T.mean_all(p["x"]), {"x": rng.normal(size=(3, 4))})
    add_case("sum_all", lambda p: T.sum_all(p["x"]), {"x": rng.normal(size=(3, 4))})
    feat_h, feat_w = 6, 7
    ys = rng.uniform(-0.5, feat_h - 0.5, size=(3, 4))
    xs = rng.uniform(-0.5, feat_w - 0.5, size=(3, 4))
    add_case(
        "roi_sample",
        lambda p: T.roi_sample([p["f"]], np.zeros(3, int), np.array([0, 1, 0]), ys, xs),
        {"f": rng.normal(size=(2, 3, feat_h, feat_w))},
    )
    add_case(
        "soft_binarize",
        lambda p: soft_binarize(p["p"], p["t"], 2.0),
        {"p": rng.uniform(0.01, 0.99, size=(2, 1, 4, 4)), "t": rng.uniform(0.01, 0.99, size=(2, 1, 4, 4))},
    )
    target = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    cases.append(
        (
            f"bce_map_loss[seed={seed}]",
            lambda p, y=target: bce_map_loss(p["p"], y),
            {"p": rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))},
        )
    )
    cases.append(
        (
            f"total_loss[seed={seed}]",
            lambda p: total_loss(p["lp"], p["lt"], p["lb"], LossWeights()),
            {"lp": np.array(rng.uniform()), "lt": np.array(rng.uniform()), "lb": np.array(rng.uniform())},
        )
    )
    return cases


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) * 10, x)


# ---------------------------------------------------------------------------
# composite checks on a tiny model

TINY_BACKBONE = BackboneConfig(stem_channels=2, stage_channels=(3, 3, 3, 3), fpn_channels=3)
TINY_HEAD = HeadConfig(channels=3, conv_stack_len=2, roi_size=4, mask_size=8)


def _tiny_proposals():
    return [
        RoIProposal((3.0, 5.0, 27.5, 30.0), 2, 0, 0),
        RoIProposal((1.0, 0.5, 63.0, 60.0), 4, 0, 0),
        RoIProposal((10.0, 12.0, 50.0, 44.0), 3, 0, 1),
    ]


def pipeline_builder(backbone_params: dict, head_params: dict, head_cfg: HeadConfig, targets: np.ndarray):
    """Scalar loss of image -> pyramid -> RoI -> head -> binarization -> multi-task loss."""
    names = sorted(backbone_params) + sorted(head_params)
    proposals = _tiny_proposals()

    def build(p):
        params = {k: p[k] for k in names}
        pyr = build_pyramid(p["image"], params)
        r_p = roi_extract(pyr, proposals, head_cfg.roi_size, "by_size").values
        r_t = roi_extract(
            pyr, proposals, head_cfg.roi_size, head_cfg.threshold_source, (params["head.t_roi.w"], params["head.t_roi.b"])
        ).values
        out = head_forward(r_p, r_t, head_cfg, params)
        l_p = bce_map_loss(out.prob, targets)
        l_t = bce_map_loss(out.thresh, 1.0 - targets)
        l_b = bce_map_loss(out.soft, targets)
        return total_loss(l_p, l_t, l_b, LossWeights())

    return build


def composite_cases(seed: int):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(2, 3, 64, 64))
    bb = {k: v.data.copy() for k, v in init_backbone(TINY_BACKBONE, rng).items()}
    # non-zero biases so no ReLU sits exactly at its kink
    for k in bb:
        if k.endswith(".b"):
            bb[k] = rng.normal(scale=0.1, size=bb[k].shape)
    hd = {k: v.data.copy() for k, v in init_head(TINY_HEAD, TINY_BACKBONE.fpn_channels, rng).items()}
    for k in hd:
        if k.endswith(".b"):
            hd[k] = rng.normal(scale=0.1, size=hd[k].shape)
    m = TINY_HEAD.mask_size
    targets = (rng.uniform(size=(3, 1, m, m)) > 0.5).astype(float)
    cases = []

    p5_weights = rng.normal(size=(2, TINY_BACKBONE.fpn_channels, 2, 2))

    def p5_readout(p):
        params = {k: p[k] for k in bb}
        return T.sum_all(T.mul(build_pyramid(p["image"], params).levels[5], T.as_tensor(p5_weights)))

    cases.append(
        (
            f"pyramid_p5_vs_stage1[seed={seed}]",
            p5_readout,
            {"backbone.c2a.w": bb["backbone.c2a.w"], **{k: v for k, v in bb.items() if k != "backbone.c2a.w"}, "image": image},
            OP_TOL,
            ["backbone.c2a.w", "backbone.stem.w"],
        )
    )

    def head_only(p):
        out = head_forward(p["r_p"], p["r_t"], TINY_HEAD, {k: p[k] for k in hd})
        return total_loss(
            bce_map_loss(out.prob, targets), bce_map_loss(out.thresh, 1.0 - targets), bce_map_loss(out.soft, targets)
        )

    c = TINY_BACKBONE.fpn_channels
    s = TINY_HEAD.roi_size
    cases.append(
        (
            f"head_forward_bce[seed={seed}]",
            head_only,
            {**hd, "r_p": rng.normal(size=(3, c, s, s)), "r_t": rng.normal(size=(3, c, s, s))},
            E2E_TOL,
            None,
        )
    )
    cases.append(
        (
            f"end_to_end[seed={seed}]",
            pipeline_builder(bb, hd, TINY_HEAD, targets),
            {**bb, **hd, "image": image},
            E2E_TOL,
            None,
        )
    )
    return cases


def run_suite(seeds=(0, 1, 2, 3, 4), max_coords: int = 12, composite_seeds=(0, 1)) -> list[GradCheckResult]:
    results = []
    for seed in seeds:
        for name, build, arrays in op_cases(seed):
            results.append(check(name, build, arrays, OP_TOL, seed=seed))
    for seed in composite_seeds:
        for name, build, arrays, tol, only in composite_cases(seed):
            if only is not None:
                grads = analytic_gradients(build, arrays)
                rng = np.random.default_rng(seed)
                worst = 0.0
                for key in only:
                    coords = rng.choice(arrays[key].size, size=min(max_coords, arrays[key].size), replace=False)
                    num = numeric_gradient(build, arrays, key, coords=coords).reshape(-1)[coords]
                    worst = max(worst, relative_error(grads[key].reshape(-1)[coords], num))
                results.append(GradCheckResult(name, worst, tol))
            else:
                results.append(check(name, build, arrays, tol, max_coords=max_coords, seed=seed))
    return results


def main_summary(results: list[GradCheckResult], elapsed: float) -> dict:
    failed = [r.name for r in results if not r.passed]
    return {
        "checks": len(results),
        "passed": len(results) - len(failed),
        "failed": failed,
        "worst_rel_err": max((r.rel_err for r in results), default=0.0),
        "seconds": round(elapsed, 3),
    }


def run_and_summarize(**kwargs) -> tuple[list[GradCheckResult], dict]:
    t0 = time.perf_counter()
    results = run_suite(**kwargs)
    return results, main_summary(results, time.perf_counter() - t0)
