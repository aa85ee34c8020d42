import copy

import numpy as np
import pytest

from atmask import tensor as T
from atmask.config import DatasetConfig, RunConfig
from atmask.model import init_model
from atmask.synthetic import generate_dataset
from atmask.training import (
    ABLATION_COLUMNS,
    TrainingError,
    ablation_config,
    evaluate,
    render_maps,
    run_ablation,
    threshold_sweep,
    train,
)


def small_config(steps=20, **head) -> RunConfig:
    cfg = RunConfig()
    cfg.head.channels = 8
    cfg.head.conv_stack_len = 2
    for k, v in head.items():
        setattr(cfg.head, k, v)
    cfg.train.steps = steps
    cfg.train.lr_decay = {}
    return cfg.validate()


@pytest.fixture(scope="module")
def data():
    return generate_dataset(DatasetConfig(n_train=12, n_eval=6))


def test_zero_steps_leaves_params(data):
    cfg = small_config(steps=0)
    start = init_model(cfg.backbone, cfg.head, cfg.train.seed)
    snapshot = {k: v.data.copy() for k, v in start.items()}
    result = train(start, data[0], cfg)
    assert result.loss_curve == []
    for k, v in result.params.items():
        np.testing.assert_array_equal(v.data, snapshot[k])


def test_same_seed_identical_curve(data):
    cfg = small_config(steps=6)
    a = train(None, data[0], cfg)
    b = train(None, data[0], cfg)
    assert a.loss_csv() == b.loss_csv()
    assert a.loss_curve == b.loss_curve


def test_loss_curve_columns(data):
    result = train(None, data[0], small_config(steps=3))
    lines = result.loss_csv().splitlines()
    assert lines[0] == "step,loss_total,loss_p,loss_t,loss_b"
    assert len(lines) == 4
    step, total, lp, lt, lb = result.loss_curve[0]
    assert total == pytest.approx(lp + lt + 2 * lb, rel=1e-12)


def test_nan_aborts_with_component(data):
    cfg = small_config(steps=3)
    params = init_model(cfg.backbone, cfg.head, 0)
    bad = params["head.t_pred.w"].data.copy()
    bad.flat[0] = np.nan
    params["head.t_pred.w"] = T.parameter(bad)
    with pytest.raises(TrainingError) as info:
        train(params, data[0], cfg)
    assert info.value.step == 0 and info.value.component == "loss_t"


def test_empty_training_set_raises():
    with pytest.raises(ValueError):
        train(None, [], small_config())


def test_lr_schedule_and_warmup():
    cfg = RunConfig()
    assert [cfg.train.lr_at(s) for s in (0, 1999, 2000, 2599, 2600)] == pytest.approx(
        [0.01, 0.01, 0.001, 0.001, 0.0001]
    )
    cfg.train.warmup_steps = 4
    assert cfg.train.lr_at(0) == pytest.approx(0.0025)
    assert cfg.train.lr_at(4) == pytest.approx(0.01)
    cfg.train.lr_decay = {5000: 0.1}
    with pytest.raises(ValueError):
        cfg.validate()


def test_training_beats_untrained(data):
    train_scenes, eval_scenes = data
    cfg = small_config(steps=150)
    cfg.train.lr_decay = {100: 0.1}
    untrained = evaluate(init_model(cfg.backbone, cfg.head, cfg.train.seed), eval_scenes, cfg)
    trained = evaluate(train(None, train_scenes, cfg).params, eval_scenes, cfg)
    assert trained.mean_iou > untrained.mean_iou


def test_evaluate_thread_count_does_not_change_results(data, monkeypatch):
    cfg = small_config()
    params = init_model(cfg.backbone, cfg.head, 1)
    monkeypatch.setenv("ATMASK_THREADS", "1")
    serial = evaluate(params, data[1], cfg)
    monkeypatch.setenv("ATMASK_THREADS", "3")
    threaded = evaluate(params, data[1], cfg)
    assert serial == threaded


def test_evaluate_empty_raises():
    cfg = small_config()
    with pytest.raises(ValueError):
        evaluate(init_model(cfg.backbone, cfg.head, 0), [], cfg)


def test_sweep_outputs_and_monotone(data, tmp_path):
    cfg = small_config()
    params = init_model(cfg.backbone, cfg.head, 2)
    scene = data[1][0]
    rows = threshold_sweep(params, scene, cfg, (0.3, 0.5, 0.7), tmp_path)
    assert [r.label for r in rows] == ["t0.30", "t0.50", "t0.70", "adaptive"]
    fixed = [r.foreground for r in rows[:3]]
    assert fixed == sorted(fixed, reverse=True)
    pgms = sorted(p.name for p in tmp_path.glob("*.pgm"))
    assert pgms == ["mask_adaptive.pgm", "mask_t0.30.pgm", "mask_t0.50.pgm", "mask_t0.70.pgm"]
    assert (tmp_path / "sweep.csv").read_text().count("\n") == 5


def test_sweep_zero_threshold_fills_every_box(data):
    cfg = small_config()
    params = init_model(cfg.backbone, cfg.head, 2)
    scene = data[1][1]
    rows = threshold_sweep(params, scene, cfg, (0.0,))
    from atmask.metrics import paste_mask
    from atmask.training import eval_proposals

    boxes = [paste_mask(np.ones((28, 28), np.uint8), p.box, scene.size).sum() for p in eval_proposals(scene, cfg)]
    assert rows[0].foreground == sum(boxes)
    with pytest.raises(ValueError):
        threshold_sweep(params, scene, cfg, (1.5,))


def test_render_writes_four_maps_per_instance(data, tmp_path):
    cfg = small_config()
    scene = data[1][0]
    paths = render_maps(init_model(cfg.backbone, cfg.head, 0), scene, cfg, tmp_path)
    assert len(paths) == 4 * len(scene.instances)
    assert all(p.read_bytes().startswith(b"P5\n28 28\n255\n") for p in paths)


def test_ablation_config_toggles():
    base = small_config()
    cfg = ablation_config(base, "baseline", 4)
    assert not cfg.head.threshold_branch and cfg.train.seed == 4
    assert base.head.threshold_branch
    assert ablation_config(base, "full", 1).head.threshold_source == "p2"
    assert ablation_config(base, "fusion", 1).head.threshold_source == "by_size"


def test_ablation_csv_row_count(data, tmp_path):
    base = small_config(steps=2)
    res = run_ablation(data[0], data[1][:2], base, [1, 2, 3], ("baseline", "threshold"), workers=1)
    lines = res.csv().splitlines()
    assert lines[0] == ",".join(ABLATION_COLUMNS)
    assert len(lines) - 1 == 2 * 3 + 2 * 3
    res.write(tmp_path)
    assert (tmp_path / "ablation.csv").exists()
    with pytest.raises(ValueError):
        run_ablation(data[0], data[1], base, [1, 2], ("baseline",))


def test_ablation_deterministic_across_workers(data):
    base = small_config(steps=2)
    a = run_ablation(data[0], data[1][:2], base, [1, 2, 3], ("baseline",), workers=1)
    b = run_ablation(data[0], data[1][:2], copy.deepcopy(base), [1, 2, 3], ("baseline",), workers=2)
    assert a.csv() == b.csv()


def test_default_run_loss_drops_to_calibrated_ratio():
    # full default budget (3000 steps, 64-channel head); ratio measured at 0.353
    # on the first run of this implementation and frozen with margin at 0.40
    train_scenes, _ = generate_dataset(DatasetConfig())
    curve = np.array([row[1] for row in train(None, train_scenes, RunConfig()).loss_curve])
    ratio = curve[-100:].mean() / curve[:100].mean()
    print(f"last/first 100-step mean loss ratio {ratio:.4f}")
    assert ratio < 0.40
