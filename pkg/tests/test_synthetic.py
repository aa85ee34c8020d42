import dataclasses

import numpy as np
import pytest

from atmask.config import DatasetConfig
from atmask.synthetic import (
    EVAL_SEED_OFFSET,
    MIN_PIXELS,
    SHAPE_KINDS,
    dataset_seeds,
    generate_dataset,
    generate_scene,
    load_dataset,
    load_scene,
    render_scene,
    save_dataset,
    save_scene,
    tight_box,
)


def _scene_bytes(scene) -> bytes:
    parts = [scene.image.tobytes()] + [i.mask.tobytes() + repr((i.box, i.shape_kind)).encode() for i in scene.instances]
    return b"".join(parts)


def test_same_seed_same_bytes():
    cfg = DatasetConfig()
    assert _scene_bytes(generate_scene(cfg, 42)) == _scene_bytes(generate_scene(cfg, 42))
    assert _scene_bytes(generate_scene(cfg, 42)) != _scene_bytes(generate_scene(cfg, 43))


def test_clean_rectangle_support_matches_mask():
    cfg = DatasetConfig(max_instances=1, noise_sigma=0.0, edge_blur_px=0.0)
    seed = next(s for s in range(500) if generate_scene(cfg, s).instances[0].shape_kind == "rectangle")
    scene, bg = render_scene(cfg, seed)
    changed = np.any(scene.image != bg, axis=0)
    np.testing.assert_array_equal(changed, scene.instances[0].mask.astype(bool))


def test_scene_invariants_over_10k_seeds():
    cfg = DatasetConfig()
    kinds = set()
    for seed in range(10_000):
        scene = generate_scene(cfg, seed)
        assert 1 <= len(scene.instances) <= cfg.max_instances
        assert scene.image.shape == (3, 64, 64)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        for inst in scene.instances:
            assert inst.mask.sum() >= MIN_PIXELS
            assert tight_box(inst.mask) == inst.box
            kinds.add(inst.shape_kind)
    assert kinds == set(SHAPE_KINDS)


def test_occlusion_removes_hidden_pixels():
    cfg = DatasetConfig(max_instances=3)
    found = 0
    for seed in range(300):
        scene, bg = render_scene(dataclasses.replace(cfg, noise_sigma=0.0, edge_blur_px=0.0), seed)
        masks = [i.mask for i in scene.instances]
        for a in range(len(masks)):
            for b in range(a + 1, len(masks)):
                assert not np.any(masks[a] & masks[b])
        if len(masks) > 1:
            found += 1
    assert found > 0


def test_no_overlap_mode_keeps_shapes_apart():
    cfg = DatasetConfig(overlap_allowed=False)
    for seed in range(50):
        masks = [i.mask for i in generate_scene(cfg, seed).instances]
        total = np.sum(masks, axis=0)
        assert total.max() <= 1


def test_dataset_seeds_disjoint_and_distinct():
    cfg = DatasetConfig()
    train, evals = dataset_seeds(cfg)
    assert len(set(train) | set(evals)) == 250
    assert max(train) < min(evals) == EVAL_SEED_OFFSET


def test_base_seed_changes_every_scene():
    cfg = DatasetConfig(n_train=5, n_eval=3)
    a_tr, a_ev = generate_dataset(cfg, 0)
    b_tr, b_ev = generate_dataset(cfg, 17)
    for x, y in zip(a_tr + a_ev, b_tr + b_ev):
        assert _scene_bytes(x) != _scene_bytes(y)


def test_config_validation():
    with pytest.raises(ValueError):
        DatasetConfig(image_size=48).validate()


def test_scene_round_trip_bit_exact(tmp_path):
    scene = generate_scene(DatasetConfig(), 5)
    d = save_scene(scene, tmp_path)
    assert sorted(p.name for p in d.iterdir()) == sorted(
        ["image.ppm", "meta.json"] + [f"mask_{i}.pgm" for i in range(len(scene.instances))]
    )
    back = load_scene(d)
    assert back.image.tobytes() == scene.image.tobytes()
    assert back.seed == scene.seed
    for a, b in zip(scene.instances, back.instances):
        assert a.mask.tobytes() == b.mask.tobytes() and a.box == b.box and a.shape_kind == b.shape_kind
    again = save_scene(back, tmp_path / "again")
    for f in d.iterdir():
        assert (again / f.name).read_bytes() == f.read_bytes()


def test_dataset_round_trip(tmp_path):
    cfg = DatasetConfig(n_train=3, n_eval=2)
    train, evals = generate_dataset(cfg)
    save_dataset(train, evals, cfg, tmp_path)
    tr2, ev2 = load_dataset(tmp_path)
    assert [_scene_bytes(s) for s in tr2 + ev2] == [_scene_bytes(s) for s in train + evals]
