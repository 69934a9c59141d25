import numpy as np
import pytest

from voxelgate import vseg
from voxelgate.errors import BadContainer


def test_float32_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5, 6)).astype(np.float32)
    path = tmp_path / "a.vseg"
    vseg.save_array(arr, path)
    out = vseg.load_array(path)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, arr)


def test_uint8_roundtrip(tmp_path):
    arr = np.random.default_rng(1).integers(0, 4, size=(4, 4, 4)).astype(np.uint8)
    path = tmp_path / "b.vseg"
    vseg.save_array(arr, path)
    np.testing.assert_array_equal(vseg.load_array(path), arr)


def test_header_layout(tmp_path):
    arr = np.zeros((2, 3), dtype=np.uint8)
    path = tmp_path / "c.vseg"
    vseg.save_array(arr, path)
    blob = path.read_bytes()
    assert blob[:6] == b"VSEG1\x00"
    assert blob[6] == 1          # dtype code u8
    assert blob[7] == 2          # rank
    assert np.frombuffer(blob, "<u4", count=2, offset=8).tolist() == [2, 3]
    assert len(blob) == 8 + 8 + 6


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.vseg"
    path.write_bytes(b"NOPE!!" + b"\x00" * 16)
    with pytest.raises(BadContainer):
        vseg.load_array(path)


def test_rejects_truncated_payload(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "t.vseg"
    vseg.save_array(arr, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(BadContainer):
        vseg.load_array(path)


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(BadContainer):
        vseg.save_array(np.zeros((2, 2), dtype=np.int64), tmp_path / "x.vseg")


def test_save_is_deterministic(tmp_path):
    arr = np.random.default_rng(2).normal(size=(8, 8)).astype(np.float32)
    p1, p2 = tmp_path / "d1.vseg", tmp_path / "d2.vseg"
    vseg.save_array(arr, p1)
    vseg.save_array(arr, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_sidecar_roundtrip(tmp_path):
    meta = {"case_id": "case_7", "channels": "flair,t1ce,t2", "crop_box": "0,8,1,7,2,6"}
    path = tmp_path / "meta.txt"
    vseg.save_sidecar(meta, path)
    assert vseg.load_sidecar(path) == meta


def test_sidecar_rejects_garbage(tmp_path):
    path = tmp_path / "meta.txt"
    path.write_text("not a key value line\n")
    with pytest.raises(BadContainer):
        vseg.load_sidecar(path)
