import numpy as np
import pytest

from atmask import tensor as T
from atmask.checkpoint import load_checkpoint, save_checkpoint
from atmask.config import BackboneConfig, HeadConfig
from atmask.model import init_model
from atmask.netpbm import NetpbmError, read_netpbm, to_gray8, write_netpbm


def test_pgm_golden_bytes(tmp_path):
    path = tmp_path / "g.pgm"
    write_netpbm(path, np.array([[0, 255, 7]], dtype=np.uint8))
    assert path.read_bytes() == b"P5\n3 1\n255\n\x00\xff\x07"


def test_ppm_golden_bytes(tmp_path):
    path = tmp_path / "c.ppm"
    write_netpbm(path, np.array([[[1, 2, 3], [4, 5, 6]]], dtype=np.uint8))
    assert path.read_bytes() == b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06"


def test_reader_skips_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 2 # width height\n255\n\x01\x02\x03\x0a")
    np.testing.assert_array_equal(read_netpbm(path), [[1, 2], [3, 10]])


@pytest.mark.parametrize("shape", [(5, 7), (4, 6, 3)])
def test_round_trip_random(tmp_path, shape):
    arr = np.random.default_rng(0).integers(0, 256, shape, dtype=np.uint8)
    write_netpbm(tmp_path / "x", arr)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "x"), arr)


def test_reader_errors(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(NetpbmError):
        read_netpbm(bad)
    bad.write_bytes(b"P5\n2 2\n65535\n")
    with pytest.raises(NetpbmError):
        read_netpbm(bad)
    bad.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(NetpbmError):
        read_netpbm(bad)
    with pytest.raises(NetpbmError):
        write_netpbm(bad, np.zeros((2, 2)))


def test_gray8_scaling():
    np.testing.assert_array_equal(to_gray8(np.array([0.0, 0.5, 1.0, 1.2, -0.1])), [0, 128, 255, 255, 0])


def test_checkpoint_bit_exact(tmp_path):
    params = init_model(BackboneConfig(), HeadConfig(channels=8), seed=3)
    meta = {"config": {"head": {"channels": 8}}, "note": "x"}
    save_checkpoint(tmp_path / "m.bin", params, meta)
    back, meta2 = load_checkpoint(tmp_path / "m.bin")
    assert meta2 == meta
    assert back.keys() == params.keys()
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()
        assert back[k].requires_grad
    save_checkpoint(tmp_path / "m2.bin", back, meta2)
    assert (tmp_path / "m2.bin").read_bytes() == (tmp_path / "m.bin").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_checkpoint_special_values(tmp_path):
    vals = np.array([0.0, -0.0, 1e-308, np.pi, -1e300])
    save_checkpoint(tmp_path / "s", {"v": T.parameter(vals)})
    back, _ = load_checkpoint(tmp_path / "s")
    assert back["v"].data.tobytes() == vals.tobytes()
