"""Tiny FPN-style backbone, proposal-to-level assignment and RoI sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import BackboneConfig
from .tensor import Tensor

LEVELS = (2, 3, 4, 5)
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


def kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def conv_params(rng, name: str, cin: int, cout: int, k: int) -> dict[str, Tensor]:
    return {
        f"{name}.w": T.parameter(kaiming(rng, (cout, cin, k, k)), name=f"{name}.w"),
        f"{name}.b": T.parameter(np.zeros(cout), name=f"{name}.b"),
    }


def apply_conv(params: dict[str, Tensor], name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return T.conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


@dataclass
class FeaturePyramid:
    levels: dict[int, Tensor]
    image_size: tuple[int, int]

    @property
    def channels(self) -> int:
        return self.levels[2].shape[1]


@dataclass
class RoIProposal:
    box: tuple[float, float, float, float]
    assigned_level: int
    instance_id: int
    batch_index: int = 0

    @property
    def width(self) -> float:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> float:
        return self.box[3] - self.box[1]


@dataclass
class RoIFeature:
    values: Tensor  # (R, C, S, S)
    source: str
    levels_read: set[int] = field(default_factory=set)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate()
    params = conv_params(rng, "backbone.stem", 3, cfg.stem_channels, 3)
    cin = cfg.stem_channels
    for lvl, cout in zip(LEVELS, cfg.stage_channels):
        params.update(conv_params(rng, f"backbone.c{lvl}a", cin, cout, 3))
        params.update(conv_params(rng, f"backbone.c{lvl}b", cout, cout, 3))
        params.update(conv_params(rng, f"backbone.lat{lvl}", cout, cfg.fpn_channels, 1))
        cin = cout
    return params


def build_pyramid(image: Tensor, params: dict[str, Tensor]) -> FeaturePyramid:
    """Image (N, 3, H, W) -> pyramid levels P2..P5 at strides 4..32."""
    image = T.as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise T.ShapeError(f"expected image batch (N, 3, H, W), got {image.shape}")
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise T.ShapeError(f"image size {h}x{w} is not divisible by 32")
    x = T.avgpool2(T.relu(apply_conv(params, "backbone.stem", image)))
    bottom_up = {}
    for lvl in LEVELS:
        x = T.relu(apply_conv(params, f"backbone.c{lvl}a", x))
        x = T.relu(apply_conv(params, f"backbone.c{lvl}b", x))
        x = T.avgpool2(x)
        bottom_up[lvl] = x
    levels: dict[int, Tensor] = {}
    top = None
    for lvl in reversed(LEVELS):
        lat = apply_conv(params, f"backbone.lat{lvl}", bottom_up[lvl])
        top = lat if top is None else T.add(lat, T.upsample_bilinear(top, 2))
        levels[lvl] = top
    return FeaturePyramid({lvl: levels[lvl] for lvl in LEVELS}, (h, w))


def assign_level(box, canonical: float = 56.0, k0: int = 4) -> int:
    """FPN rule: ``floor(k0 + log2(sqrt(w*h) / canonical))`` clamped to [2, 5]."""
    x0, y0, x1, y1 = box.box if isinstance(box, RoIProposal) else box
    w, h = x1 - x0, y1 - y0
    if not (w > 0 and h > 0):
        raise ValueError(f"degenerate box {(x0, y0, x1, y1)}")
    lvl = math.floor(k0 + math.log2(math.sqrt(w * h) / canonical))
    return min(max(lvl, LEVELS[0]), LEVELS[-1])


def jitter_box(box, frac: float, rng: np.random.Generator, size: tuple[int, int]):
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    d = rng.uniform(-frac, frac, size=4) * np.array([w, h, w, h])
    H, W = size
    nx0 = float(np.clip(x0 + d[0], 0, W))
    ny0 = float(np.clip(y0 + d[1], 0, H))
    nx1 = float(np.clip(x1 + d[2], 0, W))
    ny1 = float(np.clip(y1 + d[3], 0, H))
    if nx1 - nx0 < 1.0:
        nx0, nx1 = (nx0, nx0 + 1.0) if nx0 + 1.0 <= W else (W - 1.0, float(W))
    if ny1 - ny0 < 1.0:
        ny0, ny1 = (ny0, ny0 + 1.0) if ny0 + 1.0 <= H else (H - 1.0, float(H))
    return (nx0, ny0, nx1, ny1)


def jitter_proposals(
    scene,
    jitter_frac: float,
    rng_seed: int,
    canonical: float = 56.0,
    k0: int = 4,
    batch_index: int = 0,
) -> list[RoIProposal]:
    """One proposal per ground-truth instance, edges displaced by up to ``jitter_frac`` of the side."""
    if not 0 <= jitter_frac <= 0.5:
        raise ValueError(f"jitter_frac must lie in [0, 0.5], got {jitter_frac}")
    rng = np.random.default_rng(rng_seed)
    out = []
    for i, inst in enumerate(scene.instances):
        box = jitter_box(inst.box, jitter_frac, rng, scene.size) if jitter_frac > 0 else tuple(inst.box)
        out.append(RoIProposal(box, assign_level(box, canonical, k0), i, batch_index))
    return out


def bin_centers(box, out_size: int, stride: int, dense: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Sample coordinates of ``box`` in level index space (cell j centred at j).

    Default: the ``out_size`` bin centres. ``dense``: ``2*out_size + 1`` points
    at half-bin spacing from edge to edge, so that a 3x3 stride-2 unpadded
    conv over them is centred on the ordinary bin centres.
    """
    x0, y0, x1, y1 = box
    if dense:
        t = np.arange(2 * out_size + 1) / (2 * out_size)
    else:
        t = (np.arange(out_size) + 0.5) / out_size
    xs = (x0 + t * (x1 - x0)) / stride - 0.5
    ys = (y0 + t * (y1 - y0)) / stride - 0.5
    return ys, xs


def roi_extract(
    pyr: FeaturePyramid,
    proposals: Sequence[RoIProposal],
    out_size: int,
    source: str = "by_size",
    adaptor: tuple[Tensor, Tensor] | None = None,
) -> RoIFeature:
    """Bilinear one-sample-per-bin RoI features, (R, C, out_size, out_size).

    ``source='by_size'`` reads each proposal's assigned level; ``'p2'`` always
    reads P2. When an ``adaptor`` 3x3 conv is given, ``'p2'`` samples a dense
    grid at twice the resolution and the conv downsamples it with stride 2;
    ``'by_size'`` applies the same conv at stride 1 (padding 1), so both
    routes carry the same parameters and land on identical bin centres.
    """
    if out_size < 2:
        raise ValueError("out_size must be >= 2")
    if source not in ("by_size", "p2"):
        raise ValueError(f"unknown RoI source {source!r}")
    if not proposals:
        raise ValueError("no proposals")
    H, W = pyr.image_size
    dense = source == "p2" and adaptor is not None
    ys_all, xs_all, lvl_idx, batch = [], [], [], []
    for p in proposals:
        x0, y0, x1, y1 = p.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate box {p.box}")
        if x1 <= 0 or y1 <= 0 or x0 >= W or y0 >= H:
            raise ValueError(f"box {p.box} lies outside the {W}x{H} pyramid extent")
        lvl = 2 if source == "p2" else p.assigned_level
        ys, xs = bin_centers(p.box, out_size, STRIDES[lvl], dense)
        ys_all.append(ys)
        xs_all.append(xs)
        lvl_idx.append(LEVELS.index(lvl))
        batch.append(p.batch_index)
    levels = [pyr.levels[lvl] for lvl in LEVELS]
    out = T.roi_sample(levels, np.array(lvl_idx), np.array(batch), np.stack(ys_all), np.stack(xs_all))
    if adaptor is not None:
        w, b = adaptor
        out = T.conv2d(out, w, b, stride=2, padding=0) if dense else T.conv2d(out, w, b, padding=1)
    return RoIFeature(out, source, {LEVELS[i] for i in lvl_idx})
