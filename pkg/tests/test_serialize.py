import numpy as np
import pytest

from repxray.errors import BadMagicError, ModelFileError, TruncatedFileError, UnsupportedVersionError
from repxray.model import DEPLOY, fuse_model, init_model, model_forward
from repxray.serialize import dumps, load_model, loads, save_model

from conftest import randomize_bn


@pytest.fixture
def model():
    m = init_model(0, channels=(4, 4, 8), strides=(1, 1, 2), input_shape=(1, 16, 16))
    return randomize_bn(m, np.random.default_rng(0))


def test_roundtrip_bit_exact(tmp_path, model, rng):
    path = tmp_path / "m.rvxr"
    save_model(model, path)
    back = load_model(path)
    assert back.mode == model.mode and back.channels == model.channels and back.strides == model.strides
    assert back.input_shape == model.input_shape
    for (k, a), (k2, b) in zip(model.tensors().items(), back.tensors().items()):
        assert k == k2 and a.dtype == b.dtype and np.array_equal(a, b)
    x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(model_forward(model, x), model_forward(back, x))
    assert dumps(back) == path.read_bytes()


def test_fused_roundtrip_and_smaller(tmp_path, model, rng):
    fused = fuse_model(model)
    save_model(fused, tmp_path / "f.rvxr")
    save_model(model, tmp_path / "m.rvxr")
    back = load_model(tmp_path / "f.rvxr")
    assert back.mode == DEPLOY
    x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(model_forward(fused, x), model_forward(back, x))
    assert (tmp_path / "f.rvxr").stat().st_size < (tmp_path / "m.rvxr").stat().st_size


def test_corrupt_files(model):
    buf = dumps(model)
    with pytest.raises(BadMagicError):
        loads(b"XXXX" + buf[4:])
    with pytest.raises(BadMagicError):
        loads(b"")
    with pytest.raises(UnsupportedVersionError):
        loads(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    for cut in (6, 20, len(buf) // 2, len(buf) - 1):
        with pytest.raises(TruncatedFileError):
            loads(buf[:cut])
    with pytest.raises(ModelFileError):
        loads(buf + b"\0")
    with pytest.raises(ModelFileError):
        loads(buf[:8] + b"\x07" + buf[9:])


def test_atomic_save_leaves_no_temp(tmp_path, model):
    save_model(model, tmp_path / "m.rvxr")
    save_model(model, tmp_path / "m.rvxr")
    assert [p.name for p in tmp_path.iterdir()] == ["m.rvxr"]
