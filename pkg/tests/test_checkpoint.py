import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbd_scene.checkpoint import CheckpointError, crc_of, decode, encode, load_checkpoint, save_checkpoint
from rgbd_scene.models import CnnLstm, FusedVideoModel, Model, build_dcnn


def small_cnn(seed=0, channels=3):
    return Model(build_dcnn((channels, 17, 17), 4, scale=1 / 32, hidden=6), seed=seed)


def test_layout_by_hand():
    data = encode({"kind": "x"}, {"w": np.array([[1.0, 2.0]], np.float32)})
    blob = b'{"kind": "x"}'
    expect = b"DSC1" + struct.pack("<HI", 1, len(blob)) + blob + struct.pack("<I", 1)
    expect += struct.pack("<H", 1) + b"w" + struct.pack("<BII", 2, 1, 2) + struct.pack("<2f", 1.0, 2.0)
    expect += struct.pack("<I", zlib.crc32(expect))
    assert data == expect


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(1, 5), min_size=0, max_size=3), min_size=1, max_size=4))
def test_roundtrip_bit_exact(shapes):
    rng = np.random.default_rng(len(shapes))
    tensors = {f"t{i}": rng.normal(size=s).astype(np.float32) for i, s in enumerate(shapes)}
    spec, back = decode(encode({"n": len(shapes)}, tensors))
    assert spec == {"n": len(shapes)}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_corruption_detected():
    data = bytearray(encode({}, {"a": np.ones(3, np.float32)}))
    data[20] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(data))
    with pytest.raises(CheckpointError):
        decode(b"NOPE" + bytes(20))


def test_truncation_detected():
    good = encode({}, {"a": np.ones(3, np.float32)})
    body = good[:-4][:-4]
    with pytest.raises(CheckpointError, match="truncated"):
        decode(body + struct.pack("<I", zlib.crc32(body)))


def test_cnn_save_load(tmp_path):
    m = small_cnn(3)
    path = save_checkpoint(tmp_path / "m.dsc", m)
    back, spec = load_checkpoint(path)
    assert spec["kind"] == "cnn"
    assert back.spec == m.spec
    for k, v in m.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    assert crc_of(path) == zlib.crc32(path.read_bytes()[:-4])


def test_video_models_save_load(tmp_path):
    rgb = CnnLstm(small_cnn(1), 3, seed=1)
    depth = CnnLstm(small_cnn(2), 3, seed=2)
    fused = FusedVideoModel(rgb, depth, 4, seed=3)
    x = np.random.default_rng(0).random((2, 2, 3, 17, 17)).astype(np.float32)
    for model, inp in ((CnnLstm(small_cnn(5), 3, seed=4), x), (fused, (x, x[::-1]))):
        path = save_checkpoint(tmp_path / "v.dsc", model)
        back, _ = load_checkpoint(path)
        assert set(back.params) == set(model.params)
        np.testing.assert_array_equal(back.logits(inp), model.logits(inp))
