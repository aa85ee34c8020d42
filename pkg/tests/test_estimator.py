import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from atmask import ATMaskSegmenter
from atmask.config import DatasetConfig, RunConfig
from atmask.estimator import check_scenes, params_equal
from atmask.synthetic import generate_dataset

OVERRIDES = {"head.channels": 8, "head.conv_stack_len": 2, "train.steps": 4, "train.lr_decay": {}}


@pytest.fixture(scope="module")
def data():
    return generate_dataset(DatasetConfig(n_train=6, n_eval=3))


@pytest.fixture(scope="module")
def fitted(data):
    return ATMaskSegmenter(overrides=OVERRIDES).fit(data[0])


def test_params_round_trip_through_sklearn():
    est = ATMaskSegmenter(config=RunConfig(), overrides={"head.k": 1})
    assert set(est.get_params()) == {"config", "overrides"}
    twin = clone(est)
    assert twin.get_params()["overrides"] == {"head.k": 1}
    est.set_params(overrides={"head.k": 3})
    assert est._resolve().head.k == 3.0


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        ATMaskSegmenter().predict(data[1])


def test_predict_shapes(fitted, data):
    preds = fitted.predict(data[1])
    assert len(preds) == len(data[1])
    for masks, scene in zip(preds, data[1]):
        assert len(masks) == len(scene.instances)
        assert all(m.shape == scene.size and m.dtype == np.uint8 for m in masks)
    maps = fitted.predict_maps(data[1][0])
    assert set(maps) == {"prob", "thresh", "soft"}
    assert fitted.n_params_ == sum(p.data.size for p in fitted.params_.values())
    assert len(fitted.loss_curve_) == 4


def test_score_equals_evaluate(fitted, data):
    assert fitted.score(data[1]) == fitted.evaluate(data[1]).mean_iou


def test_save_load_reproduces_metrics(fitted, data, tmp_path):
    fitted.save(tmp_path / "m.bin")
    back = ATMaskSegmenter.load(tmp_path / "m.bin")
    assert params_equal(back.params_, fitted.params_)
    assert back.config_ == fitted.config_
    assert back.evaluate(data[1]).summary() == fitted.evaluate(data[1]).summary()


def test_fit_is_deterministic(data, fitted):
    again = ATMaskSegmenter(overrides=OVERRIDES).fit(data[0])
    assert params_equal(again.params_, fitted.params_)


def test_check_scenes_validation(data):
    assert len(check_scenes(data[1][0])) == 1
    with pytest.raises(ValueError):
        check_scenes([])
    with pytest.raises(TypeError):
        check_scenes([np.zeros((3, 64, 64))])
