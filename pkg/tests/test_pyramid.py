import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atmask import tensor as T
from atmask.config import BackboneConfig, DatasetConfig
from atmask.gradcheck import check
from atmask.pyramid import (
    FeaturePyramid,
    RoIProposal,
    assign_level,
    build_pyramid,
    init_backbone,
    jitter_proposals,
    roi_extract,
)
from atmask.synthetic import generate_scene


def _pyramid_from(level_value) -> FeaturePyramid:
    levels = {lvl: T.as_tensor(level_value(lvl)) for lvl in (2, 3, 4, 5)}
    return FeaturePyramid(levels, (64, 64))


def test_level_shapes_for_64px():
    params = init_backbone(BackboneConfig(), np.random.default_rng(0))
    pyr = build_pyramid(T.as_tensor(np.random.default_rng(1).random((2, 3, 64, 64))), params)
    assert {lvl: pyr.levels[lvl].shape[2:] for lvl in pyr.levels} == {2: (16, 16), 3: (8, 8), 4: (4, 4), 5: (2, 2)}
    assert all(pyr.levels[lvl].shape[:2] == (2, 16) for lvl in pyr.levels)


def test_constant_image_finite():
    params = init_backbone(BackboneConfig(), np.random.default_rng(0))
    pyr = build_pyramid(T.as_tensor(np.full((1, 3, 64, 64), 0.7)), params)
    assert all(np.all(np.isfinite(v.data)) for v in pyr.levels.values())


def test_indivisible_image_raises():
    params = init_backbone(BackboneConfig(), np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        build_pyramid(T.as_tensor(np.zeros((1, 3, 48, 40))), params)


def test_assign_level_examples():
    assert assign_level((0, 0, 56, 56)) == 4
    assert assign_level((0, 0, 14, 14)) == 2
    assert assign_level((0, 0, 1000, 1000)) == 5
    with pytest.raises(ValueError):
        assign_level((5, 5, 5, 9))


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0.5, 500), b=st.floats(0.5, 500))
def test_assign_level_monotone_in_area(a, b):
    lo, hi = sorted((a, b))
    assert assign_level((0, 0, lo, lo)) <= assign_level((0, 0, hi, hi))


def test_constant_feature_gives_constant_roi():
    pyr = _pyramid_from(lambda lvl: np.full((1, 2, 64 // 2**lvl, 64 // 2**lvl), 3.25))
    for source in ("by_size", "p2"):
        roi = roi_extract(pyr, [RoIProposal((0, 0, 64, 64), 5, 0)], 7, source)
        np.testing.assert_allclose(roi.values.data, 3.25, rtol=0, atol=1e-14)


def test_aligned_box_on_ramp_is_exact():
    ramp = np.add.outer(10 * np.arange(16.0), np.arange(16.0))[None, None]
    pyr = _pyramid_from(lambda lvl: ramp if lvl == 2 else np.zeros((1, 1, 64 // 2**lvl, 64 // 2**lvl)))
    # stride-4 cells centred at 4j+2; a 4-bin box from x=8 to x=24 hits cells 2..5 exactly
    roi = roi_extract(pyr, [RoIProposal((8.0, 12.0, 24.0, 28.0), 2, 0)], 4, "p2")
    np.testing.assert_array_equal(roi.values.data[0, 0], ramp[0, 0, 3:7, 2:6])


def test_p2_source_reads_only_level_two():
    pyr = _pyramid_from(lambda lvl: np.random.default_rng(lvl).random((1, 2, 64 // 2**lvl, 64 // 2**lvl)))
    boxes = [(0, 0, 8, 8), (0, 0, 30, 30), (0, 0, 64, 64)]
    proposals = [RoIProposal(b, assign_level(b), 0) for b in boxes]
    assert roi_extract(pyr, proposals, 4, "p2").levels_read == {2}
    assert roi_extract(pyr, proposals, 4, "by_size").levels_read == {2, 3, 4}


def test_out_of_extent_box_raises():
    pyr = _pyramid_from(lambda lvl: np.zeros((1, 1, 64 // 2**lvl, 64 // 2**lvl)))
    with pytest.raises(ValueError):
        roi_extract(pyr, [RoIProposal((70, 70, 90, 90), 3, 0)], 4)


def test_roi_fd_gradient_wrt_level():
    rng = np.random.default_rng(4)
    box = RoIProposal((5.3, 7.1, 40.2, 33.9), 3, 0)

    def build(a):
        levels = {lvl: (a["p3"] if lvl == 3 else T.as_tensor(np.zeros((1, 2, 64 // 2**lvl, 64 // 2**lvl)))) for lvl in (2, 3, 4, 5)}
        return T.sum_all(roi_extract(FeaturePyramid(levels, (64, 64)), [box], 5, "by_size").values)

    assert check("roi", build, {"p3": rng.normal(size=(1, 2, 8, 8))}).rel_err <= 1e-5


def test_p2_adaptor_lands_on_r_p_grid():
    rng = np.random.default_rng(6)
    pyr = _pyramid_from(lambda lvl: rng.normal(size=(1, 2, 64 // 2**lvl, 64 // 2**lvl)))
    box = RoIProposal((6.0, 9.0, 50.0, 41.0), 2, 0)
    w = T.as_tensor(rng.normal(size=(2, 2, 3, 3)))
    b = T.as_tensor(np.zeros(2))
    roi = roi_extract(pyr, [box], 14, "p2", (w, b))
    assert roi.values.shape == (1, 2, 14, 14)


def test_jitter_zero_is_identity_and_seeded():
    scene = generate_scene(DatasetConfig(), 3)
    props = jitter_proposals(scene, 0.0, 1)
    assert [p.box for p in props] == [tuple(i.box) for i in scene.instances]
    a = jitter_proposals(scene, 0.1, 7)
    b = jitter_proposals(scene, 0.1, 7)
    assert [p.box for p in a] == [p.box for p in b]
    assert [p.instance_id for p in a] == list(range(len(scene.instances)))


def test_jitter_displacement_bound():
    scene = generate_scene(DatasetConfig(), 11)
    for seed in range(1000):
        for p, inst in zip(jitter_proposals(scene, 0.1, seed), scene.instances):
            x0, y0, x1, y1 = inst.box
            w, h = x1 - x0, y1 - y0
            d = np.abs(np.subtract(p.box, inst.box))
            assert np.all(d <= np.array([w, h, w, h]) * 0.1 + 1e-9)


def test_jitter_rejects_bad_fraction():
    with pytest.raises(ValueError):
        jitter_proposals(generate_scene(DatasetConfig(), 0), 0.6, 0)
