"""Tensor container and checkpoint format round trips and error paths."""

import io

import numpy as np
import pytest

from fsnet import serialize


def test_tensor_round_trip_float32(tmp_path):
    arr = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.fsnt"
    serialize.save_tensor(path, arr)
    loaded = serialize.load_tensor(path)
    assert loaded.dtype == np.float32
    np.testing.assert_array_equal(loaded, arr)


def test_tensor_round_trip_float64(tmp_path):
    arr = np.random.default_rng(1).random((2, 2))
    path = tmp_path / "t.fsnt"
    serialize.save_tensor(path, arr)
    loaded = serialize.load_tensor(path)
    assert loaded.dtype == np.float64
    np.testing.assert_array_equal(loaded, arr)


def test_tensor_header_layout():
    buf = io.BytesIO()
    serialize.write_tensor(buf, np.zeros((2, 3), dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"FSNT"
    # version 1, rank 2, extents 2 and 3, dtype tag 1, then 24 bytes of zeros
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (2).to_bytes(4, "little")
    assert raw[12:20] == (2).to_bytes(8, "little")
    assert raw[20:28] == (3).to_bytes(8, "little")
    assert raw[28:32] == (1).to_bytes(4, "little")
    assert len(raw) == 32 + 6 * 4


def test_bad_magic_raises():
    buf = io.BytesIO(b"NOPE" + bytes(64))
    with pytest.raises(ValueError, match="magic"):
        serialize.read_tensor(buf)


def test_truncated_tensor_raises():
    buf = io.BytesIO()
    serialize.write_tensor(buf, np.ones(10, dtype=np.float32))
    raw = buf.getvalue()
    with pytest.raises(ValueError, match="truncated"):
        serialize.read_tensor(io.BytesIO(raw[:-8]))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"a.weight": rng.random((2, 3)).astype(np.float32),
               "b.bias": rng.random(4).astype(np.float32)}
    manifest = {"depth": "4", "upsample_mode": "nearest"}
    path = tmp_path / "model.ckpt"
    serialize.save_checkpoint(path, manifest, tensors)
    loaded_manifest, loaded = serialize.load_checkpoint(path)
    assert loaded_manifest == manifest
    assert list(loaded) == ["a.weight", "b.bias"]
    for key in tensors:
        np.testing.assert_array_equal(loaded[key], tensors[key])


def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"w": rng.random((4, 4)).astype(np.float32)}
    p1 = tmp_path / "one.ckpt"
    p2 = tmp_path / "two.ckpt"
    serialize.save_checkpoint(p1, {"k": "v"}, tensors)
    manifest, loaded = serialize.load_checkpoint(p1)
    serialize.save_checkpoint(p2, manifest, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_checkpoint_raises(tmp_path):
    path = tmp_path / "model.ckpt"
    serialize.save_checkpoint(path, {"k": "v"}, {"w": np.ones(8, dtype=np.float32)})
    raw = path.read_bytes()
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        serialize.load_checkpoint(clipped)


def test_checkpoint_magic_mismatch(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(ValueError, match="magic"):
        serialize.load_checkpoint(path)


def test_manifest_parsing_ignores_comments_and_blanks():
    fields = serialize.parse_manifest("# comment\n\nalpha = 1\n beta = two words \n")
    assert fields == {"alpha": "1", "beta": "two words"}


def test_manifest_rejects_bad_lines():
    with pytest.raises(ValueError, match="key = value"):
        serialize.parse_manifest("not a pair")
