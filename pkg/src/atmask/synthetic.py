"""Deterministic synthetic instance-segmentation scenes and their on-disk layout."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import DatasetConfig
from .netpbm import read_netpbm, write_netpbm

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")
MIN_PIXELS = 16
EVAL_SEED_OFFSET = 10**6
_SUPERSAMPLE = 4
_MAX_RETRIES = 100


@dataclass
class Instance:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    box: tuple[float, float, float, float]  # x0, y0, x1, y1; pixel edges
    shape_kind: str


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W) float64, multiples of 1/255
    instances: list[Instance]
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask has no bounding box")
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _coverage(kind: str, params: dict, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape, via regular supersampling."""
    s = _SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy, ang = params["cx"], params["cy"], params["angle"]
    ca, sa = np.cos(ang), np.sin(ang)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    if kind == "ellipse":
        inside = (u / params["a"]) ** 2 + (v / params["b"]) ** 2 <= 1.0
    elif kind == "rectangle":
        inside = (np.abs(u) <= params["a"]) & (np.abs(v) <= params["b"])
    else:
        verts = params["verts"]
        signs = []
        for i in range(3):
            (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % 3]
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
        inside = ((signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)) | (
            (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
        )
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _random_shape(rng: np.random.Generator, size: int) -> tuple[str, dict]:
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    lo, hi = size * 0.09, size * 0.22
    a, b = rng.uniform(lo, hi, size=2)
    margin = max(a, b) * 0.5
    params = {
        "cx": float(rng.uniform(margin, size - margin)),
        "cy": float(rng.uniform(margin, size - margin)),
        "angle": float(rng.uniform(0, np.pi)),
        "a": float(a),
        "b": float(b),
    }
    if kind == "triangle":
        base = rng.uniform(0, 2 * np.pi)
        angles = base + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
        radii = rng.uniform(lo * 1.2, hi * 1.2, size=3)
        params["verts"] = [
            (params["cx"] + r * np.cos(t), params["cy"] + r * np.sin(t)) for r, t in zip(radii, angles)
        ]
    return kind, params


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(2):
        fx, fy = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += 0.05 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    tex += gx * (xx - 0.5) + gy * (yy - 0.5)
    return np.clip(base[:, None, None] + tex[None], 0.0, 1.0)


def _fill_color(rng: np.random.Generator, bg: np.ndarray) -> np.ndarray:
    mean = bg.reshape(3, -1).mean(axis=1)
    sign = np.where(mean > 0.5, -1.0, 1.0)
    return np.clip(mean + sign * rng.uniform(0.3, 0.45, size=3), 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_scene(cfg: DatasetConfig, seed: int) -> tuple[SyntheticScene, np.ndarray]:
    """Generate a scene and also return its uncorrupted quantized background."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    bg = _background(rng, size)
    target = int(rng.integers(1, cfg.max_instances + 1))

    masks: list[np.ndarray] = []
    kinds: list[str] = []
    colors: list[np.ndarray] = []
    retries = 0
    while len(masks) < target and retries < _MAX_RETRIES:
        kind, params = _random_shape(rng, size)
        color = _fill_color(rng, bg)
        new = (_coverage(kind, params, size) >= 0.5).astype(np.uint8)
        occupied = np.zeros_like(new)
        for m in masks:
            occupied |= m
        if not cfg.overlap_allowed and np.any(new & occupied):
            retries += 1
            continue
        trimmed = [m & (1 - new) for m in masks]
        if new.sum() < MIN_PIXELS or any(m.sum() < MIN_PIXELS for m in trimmed):
            retries += 1
            continue
        masks = trimmed + [new]
        kinds.append(kind)
        colors.append(color)

    img = bg.copy()
    for m, color in zip(masks, colors):
        alpha = m.astype(np.float64)[None]
        img = img * (1.0 - alpha) + color[:, None, None] * alpha
    if cfg.edge_blur_px > 0:
        img = np.stack([gaussian_filter(ch, cfg.edge_blur_px, mode="nearest") for ch in img])
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    instances = [Instance(m, tight_box(m), k) for m, k in zip(masks, kinds)]
    scene = SyntheticScene(quantize(img), instances, int(seed), dataclasses.asdict(cfg))
    return scene, quantize(bg)


def generate_scene(cfg: DatasetConfig, seed: int) -> SyntheticScene:
    return render_scene(cfg, seed)[0]


def dataset_seeds(cfg: DatasetConfig, base_seed: int | None = None) -> tuple[list[int], list[int]]:
    base = cfg.base_seed if base_seed is None else base_seed
    if cfg.n_train > EVAL_SEED_OFFSET:
        raise ValueError("n_train would overlap the eval seed range")
    train = [base + i for i in range(cfg.n_train)]
    evals = [base + EVAL_SEED_OFFSET + i for i in range(cfg.n_eval)]
    return train, evals


def generate_dataset(cfg: DatasetConfig, base_seed: int | None = None):
    train_seeds, eval_seeds = dataset_seeds(cfg, base_seed)
    return [generate_scene(cfg, s) for s in train_seeds], [generate_scene(cfg, s) for s in eval_seeds]


# ---------------------------------------------------------------------------
# disk layout: scene_<seed>/image.ppm, mask_<i>.pgm, meta.json


def save_scene(scene: SyntheticScene, root: str | Path) -> Path:
    d = Path(root) / f"scene_{scene.seed}"
    d.mkdir(parents=True, exist_ok=True)
    rgb = np.rint(scene.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    write_netpbm(d / "image.ppm", rgb)
    for i, inst in enumerate(scene.instances):
        write_netpbm(d / f"mask_{i}.pgm", (inst.mask * 255).astype(np.uint8))
    meta = {
        "seed": scene.seed,
        "boxes": [list(inst.box) for inst in scene.instances],
        "shape_kinds": [inst.shape_kind for inst in scene.instances],
        "config": scene.config,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_scene(path: str | Path) -> SyntheticScene:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    rgb = read_netpbm(d / "image.ppm")
    image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
    instances = []
    for i, (box, kind) in enumerate(zip(meta["boxes"], meta["shape_kinds"])):
        raw = read_netpbm(d / f"mask_{i}.pgm")
        if not np.isin(raw, (0, 255)).all():
            raise ValueError(f"{d}/mask_{i}.pgm is not a 0/255 mask")
        instances.append(Instance((raw // 255).astype(np.uint8), tuple(float(v) for v in box), kind))
    return SyntheticScene(image, instances, int(meta["seed"]), meta.get("config", {}))


def save_dataset(train, evals, cfg: DatasetConfig, root: str | Path) -> Path:
    root = Path(root)
    for split, scenes in (("train", train), ("eval", evals)):
        for scene in scenes:
            save_scene(scene, root / split)
    index = {
        "config": dataclasses.asdict(cfg),
        "train": [s.seed for s in train],
        "eval": [s.seed for s in evals],
    }
    (root / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root: str | Path):
    root = Path(root)
    index = json.loads((root / "dataset.json").read_text())
    train = [load_scene(root / "train" / f"scene_{s}") for s in index["train"]]
    evals = [load_scene(root / "eval" / f"scene_{s}") for s in index["eval"]]
    return train, evals
