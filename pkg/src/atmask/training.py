"""Training loop, evaluation, threshold sweep and the ablation ladder."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .binarization import hard_binarize, hard_binarize_map
from .config import RunConfig
from .head import binarize_output
from .losses import bce_map_loss, make_mask_target, total_loss
from .metrics import EvalReport, paste_mask, score_masks
from .model import Params, forward, init_model
from .netpbm import to_gray8, write_netpbm
from .pyramid import jitter_proposals

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "loss_total", "loss_p", "loss_t", "loss_b")
EVAL_COLUMNS = ("scene_seed", "instance", "iou", "boundary_error")
ABLATION_COLUMNS = ("config", "seed", "mean_iou", "ap50", "ap75", "boundary_error")


class TrainingError(RuntimeError):
    def __init__(self, step: int, component: str):
        super().__init__(f"non-finite {component} at step {step}")
        self.step = step
        self.component = component


@dataclass
class TrainResult:
    params: Params
    loss_curve: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def loss_csv(self) -> str:
        return rows_to_csv(LOSS_COLUMNS, self.loss_curve)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        values = [row[c] for c in columns] if isinstance(row, dict) else row
        writer.writerow([_fmt(v) for v in values])
    return buf.getvalue()


def _batch(scenes, cfg: RunConfig, rng: np.random.Generator):
    """Draw scenes until ``rois_per_step`` jittered proposals are collected."""
    tc = cfg.train
    picked, proposals = [], []
    while len(proposals) < tc.rois_per_step:
        scene = scenes[int(rng.integers(len(scenes)))]
        props = jitter_proposals(
            scene, tc.jitter_frac, int(rng.integers(2**31)), tc.canonical_size, tc.k0, len(picked)
        )
        picked.append(scene)
        proposals.extend(props)
    proposals = proposals[: tc.rois_per_step]
    picked = picked[: proposals[-1].batch_index + 1]
    return picked, proposals


def compute_losses(params: Params, cfg: RunConfig, scenes, proposals):
    """Forward one batch; return ``(total, L_p, L_t, L_b)`` scalar tensors."""
    images = np.stack([s.image for s in scenes])
    out = forward(params, cfg.head, images, proposals)
    m = cfg.head.mask_size
    targets = [
        make_mask_target(scenes[p.batch_index], p, m, cfg.loss.threshold_target) for p in proposals
    ]
    gt = np.stack([t.gt_mask for t in targets])[:, None].astype(np.float64)
    red = cfg.loss.reduction
    l_p = bce_map_loss(out.prob, gt, red)
    if out.thresh is None:
        zero = T.as_tensor(0.0)
        return total_loss(l_p, zero, zero, cfg.loss), l_p, zero, zero
    gt_t = np.stack([t.gt_threshold_target for t in targets])[:, None].astype(np.float64)
    l_t = bce_map_loss(out.thresh, gt_t, red)
    l_b = bce_map_loss(out.soft, gt, red)
    return total_loss(l_p, l_t, l_b, cfg.loss), l_p, l_t, l_b


def train(params: Params | None, scenes, cfg: RunConfig) -> TrainResult:
    """Momentum SGD on the multi-task loss; deterministic given ``cfg.train.seed``."""
    cfg.validate()
    if not scenes:
        raise ValueError("empty training set")
    if params is None:
        params = init_model(cfg.backbone, cfg.head, cfg.train.seed)
    tc = cfg.train
    rng = np.random.default_rng(tc.seed)
    opt = T.SGD(list(params.values()), tc.lr, tc.momentum)
    curve = []
    for step in range(tc.steps):
        batch_scenes, proposals = _batch(scenes, cfg, rng)
        loss, l_p, l_t, l_b = compute_losses(params, cfg, batch_scenes, proposals)
        values = (loss.item(), l_p.item(), l_t.item(), l_b.item())
        # name the first non-finite component; the total only if the parts are finite
        for name, v in zip(("loss_p", "loss_t", "loss_b", "loss_total"), values[1:] + values[:1]):
            if not math.isfinite(v):
                raise TrainingError(step, name)
        curve.append((step, *values))
        T.backward(loss)
        if tc.grad_clip > 0:
            T.clip_grad_norm(opt.params, tc.grad_clip)
        opt.step(tc.lr_at(step))
        if step % 500 == 0:
            log.info("step %d loss %.4f", step, values[0])
    return TrainResult(params, curve)


def eval_proposals(scene, cfg: RunConfig, batch_index: int = 0):
    tc = cfg.train
    return jitter_proposals(scene, tc.jitter_frac, scene.seed, tc.canonical_size, tc.k0, batch_index)


def predict_scene(params: Params, scene, cfg: RunConfig, proposals=None):
    """Head outputs for one scene under no-grad; proposals default to the eval jitter."""
    proposals = eval_proposals(scene, cfg) if proposals is None else proposals
    with T.no_grad():
        out = forward(params, cfg.head, scene.image[None], proposals)
    return out, proposals


def predict_masks(params: Params, scene, cfg: RunConfig) -> list[np.ndarray]:
    out, proposals = predict_scene(params, scene, cfg)
    masks = binarize_output(out, cfg.head)
    return [paste_mask(m, p.box, scene.size) for m, p in zip(masks, proposals)]


def _threads() -> int:
    raw = os.environ.get("ATMASK_THREADS")
    return max(1, int(raw)) if raw else (os.cpu_count() or 1)


def evaluate(params: Params, scenes, cfg: RunConfig) -> EvalReport:
    if not scenes:
        raise ValueError("empty evaluation set")
    workers = min(_threads(), len(scenes))
    if workers > 1:
        # inference records no tape, so scenes can run concurrently
        with ThreadPoolExecutor(workers) as pool:
            preds = list(pool.map(lambda s: predict_masks(params, s, cfg), scenes))
    else:
        preds = [predict_masks(params, s, cfg) for s in scenes]
    return score_masks(preds, scenes)


# ---------------------------------------------------------------------------
# threshold sweep


@dataclass
class SweepRow:
    label: str
    threshold: float | None
    foreground: int
    misclassified: int


def threshold_sweep(params: Params, scene, cfg: RunConfig, thresholds=(0.3, 0.5, 0.7), out_dir=None):
    """Fixed-threshold masks at each ``t`` plus the adaptive ``P >= T`` mask."""
    for t in thresholds:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"threshold {t} outside [0, 1]")
    out, proposals = predict_scene(params, scene, cfg)
    prob = out.prob.data[:, 0]
    variants = [(f"t{t:.2f}", float(t), hard_binarize(prob, t)) for t in thresholds]
    if out.thresh is not None:
        variants.append(("adaptive", None, hard_binarize_map(prob, out.thresh.data[:, 0])))
    rows, images = [], {}
    for label, t, masks in variants:
        union = np.zeros(scene.size, dtype=np.uint8)
        fg = wrong = 0
        for m, p in zip(masks, proposals):
            pasted = paste_mask(m, p.box, scene.size)
            gt = scene.instances[p.instance_id].mask
            fg += int(pasted.sum())
            wrong += int((pasted != gt).sum())
            union |= pasted
        rows.append(SweepRow(label, t, fg, wrong))
        images[label] = union
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for label, img in images.items():
            write_netpbm(d / f"mask_{label}.pgm", img * 255)
        csv_rows = [
            (r.label, "" if r.threshold is None else r.threshold, r.foreground, r.misclassified) for r in rows
        ]
        (d / "sweep.csv").write_text(
            rows_to_csv(("mask", "threshold", "foreground", "misclassified"), csv_rows)
        )
    return rows


def render_maps(params: Params, scene, cfg: RunConfig, out_dir) -> list[Path]:
    """Write per-instance P / T / soft B heatmaps and the hard mask as 8-bit PGMs."""
    out, _ = predict_scene(params, scene, cfg)
    hard = binarize_output(out, cfg.head)
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(out.prob.shape[0]):
        maps = {"prob": out.prob.data[i, 0], "hard": hard[i].astype(np.float64)}
        if out.thresh is not None:
            maps["thresh"] = out.thresh.data[i, 0]
            maps["soft"] = out.soft.data[i, 0]
        for name, values in maps.items():
            path = d / f"instance_{i}_{name}.pgm"
            write_netpbm(path, to_gray8(values))
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# ablation ladder

ABLATION_CONFIGS = {
    "baseline": dict(threshold_branch=False, p2t=False, t2p=False, threshold_source="by_size"),
    "threshold": dict(threshold_branch=True, p2t=False, t2p=False, threshold_source="by_size"),
    "p2t": dict(threshold_branch=True, p2t=True, t2p=False, threshold_source="by_size"),
    "fusion": dict(threshold_branch=True, p2t=True, t2p=True, threshold_source="by_size"),
    "full": dict(threshold_branch=True, p2t=True, t2p=True, threshold_source="p2"),
}
LADDER = ("baseline", "threshold", "fusion", "full")


def ablation_config(base: RunConfig, name: str, seed: int) -> RunConfig:
    cfg = copy.deepcopy(base)
    for key, value in ABLATION_CONFIGS[name].items():
        setattr(cfg.head, key, value)
    cfg.train.seed = seed
    return cfg.validate()


def _ablation_cell(args):
    name, seed, train_scenes, eval_scenes, base, keep = args
    t0 = time.perf_counter()
    cfg = ablation_config(base, name, seed)
    result = train(None, train_scenes, cfg)
    report = evaluate(result.params, eval_scenes, cfg)
    row = {"config": name, "seed": seed, **report.summary()}
    return row, time.perf_counter() - t0, (result.params if keep else None)


@dataclass
class AblationResult:
    runs: list[dict]
    configs: tuple[str, ...]
    seconds: dict[tuple[str, int], float] = field(default_factory=dict)
    params: dict[tuple[str, int], Params] = field(default_factory=dict)

    def values(self, name: str, metric: str = "mean_iou") -> np.ndarray:
        return np.array([r[metric] for r in self.runs if r["config"] == name])

    def median(self, name: str, metric: str = "mean_iou") -> float:
        return float(np.median(self.values(name, metric)))

    def summary_rows(self, names=None) -> list[dict]:
        rows = []
        for name in names or self.configs:
            for stat, fn in (("median", np.median), ("min", np.min), ("max", np.max)):
                row = {"config": name, "seed": stat}
                for metric in ABLATION_COLUMNS[2:]:
                    row[metric] = float(fn(self.values(name, metric)))
                rows.append(row)
        return rows

    def ladder_inversions(self, ladder=LADDER, metric: str = "mean_iou") -> list[tuple[str, str, float]]:
        meds = [self.median(n, metric) for n in ladder]
        return [
            (ladder[i], ladder[i + 1], meds[i] - meds[i + 1])
            for i in range(len(ladder) - 1)
            if meds[i + 1] < meds[i]
        ]

    def csv(self) -> str:
        return rows_to_csv(ABLATION_COLUMNS, self.runs + self.summary_rows())

    def write(self, out_dir) -> list[Path]:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        files = {"ablation.csv": self.csv()}
        tables = {
            "ladder.csv": LADDER,
            "roi_source.csv": ("full", "fusion"),
            "fusion_steps.csv": ("threshold", "p2t", "fusion"),
        }
        for fname, names in tables.items():
            if all(n in self.configs for n in names):
                files[fname] = rows_to_csv(ABLATION_COLUMNS, self.summary_rows(names))
        paths = []
        for fname, text in files.items():
            (d / fname).write_text(text)
            paths.append(d / fname)
        return paths


def run_ablation(
    train_scenes,
    eval_scenes,
    base: RunConfig,
    seeds,
    configs=LADDER,
    workers: int | None = None,
    keep_params: bool = False,
):
    """Train and evaluate every (config, seed) cell with identical budgets.

    Wall time per cell is recorded in ``seconds``; it never enters the CSVs.
    """
    if len(seeds) < 3:
        raise ValueError("the ablation needs at least 3 seeds")
    unknown = set(configs) - set(ABLATION_CONFIGS)
    if unknown:
        raise ValueError(f"unknown ablation configs {sorted(unknown)}")
    cells = [(n, s, train_scenes, eval_scenes, base, keep_params) for n in configs for s in seeds]
    workers = min(_threads() if workers is None else workers, len(cells))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_ablation_cell, cells))
    else:
        done = [_ablation_cell(c) for c in cells]
    result = AblationResult([row for row, _, _ in done], tuple(configs))
    for (name, seed, *_), (_, secs, params) in zip(cells, done):
        result.seconds[(name, seed)] = secs
        if params is not None:
            result.params[(name, seed)] = params
    return result
