import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from atmask.config import DatasetConfig
from atmask.losses import crop_resample
from atmask.metrics import boundary_band, boundary_error, iou, paste_mask, score_masks
from atmask.synthetic import generate_scene

masks = arrays(np.uint8, (8, 8), elements=st.integers(0, 1))


def _gt_predictions(scenes):
    return [[inst.mask.copy() for inst in s.instances] for s in scenes]


def test_perfect_predictions():
    scenes = [generate_scene(DatasetConfig(), s) for s in range(5)]
    rep = score_masks(_gt_predictions(scenes), scenes)
    assert (rep.mean_iou, rep.ap50, rep.ap75, rep.boundary_error) == (1.0, 1.0, 1.0, 0.0)


def test_empty_predictions_score_zero():
    scenes = [generate_scene(DatasetConfig(), s) for s in range(3)]
    preds = [[np.zeros_like(i.mask) for i in s.instances] for s in scenes]
    assert score_masks(preds, scenes).mean_iou == 0.0


def test_empty_eval_set_raises():
    with pytest.raises(ValueError):
        score_masks([], [])


def test_hand_counted_three_quarters_after_paste():
    gt_roi = np.ones((28, 28), np.uint8)
    pred_roi = gt_roi.copy()
    pred_roi[:, 21:] = 0
    box = (8.0, 8.0, 36.0, 36.0)  # 28 px box: one image pixel per mask cell
    gt = paste_mask(gt_roi, box, (64, 64))
    pred = paste_mask(pred_roi, box, (64, 64))
    assert gt.sum() == 784 and pred.sum() == 588
    assert iou(pred, gt) == 0.75


@settings(max_examples=100, deadline=None)
@given(a=masks, b=masks)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == 1.0


def test_ap75_never_exceeds_ap50():
    rng = np.random.default_rng(0)
    scenes = [generate_scene(DatasetConfig(), s) for s in range(10)]
    preds = [[(i.mask ^ (rng.random(i.mask.shape) < 0.02)).astype(np.uint8) for i in s.instances] for s in scenes]
    rep = score_masks(preds, scenes)
    assert rep.ap75 <= rep.ap50
    assert all(0 <= v <= 1 for v in (rep.mean_iou, rep.ap50, rep.ap75, rep.boundary_error))


def test_boundary_band_of_square():
    gt = np.zeros((20, 20), np.uint8)
    gt[5:15, 5:15] = 1
    band = boundary_band(gt)
    # dilation by 2 gives 14x14, erosion by 2 leaves 6x6
    assert band.sum() == 14 * 14 - 6 * 6
    pred = gt.copy()
    pred[5, 5:15] = 0
    assert boundary_error(pred, gt) == pytest.approx(10 / band.sum())


def test_paste_back_consistency():
    cfg = DatasetConfig()
    for seed in range(40):
        for inst in generate_scene(cfg, seed).instances:
            x0, y0, x1, y1 = inst.box
            if min(x1 - x0, y1 - y0) < 16:
                continue
            roi = (crop_resample(inst.mask, inst.box, 28) >= 0.5).astype(np.uint8)
            assert iou(paste_mask(roi, inst.box, inst.mask.shape), inst.mask) >= 0.95
