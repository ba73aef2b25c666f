import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from paratranscnn import io as ptio


def test_ptcn_layout_by_hand():
    arr = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], dtype=np.float32)
    expected = b"PTCN" + struct.pack("<III", 1, 0, 2) + struct.pack("<QQ", 2, 3) + struct.pack("<6f", *arr.ravel())
    assert ptio.tensor_bytes(arr) == expected
    f64 = np.array([0.5], dtype=np.float64)
    assert ptio.tensor_bytes(f64) == b"PTCN" + struct.pack("<IIIQd", 1, 1, 1, 1, 0.5)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_ptcn_round_trip_bit_exact(arr):
    import io
    back = ptio.read_tensor_from(io.BytesIO(ptio.tensor_bytes(arr)))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_ptcn_file_round_trip_and_errors(tmp_path):
    p = tmp_path / "t.ptcn"
    arr = np.arange(12, dtype=np.float64).reshape(3, 4)
    ptio.save_tensor(p, arr)
    np.testing.assert_array_equal(ptio.load_tensor(p), arr)
    raw = p.read_bytes()
    (tmp_path / "trunc.ptcn").write_bytes(raw[:-3])
    with pytest.raises(ptio.FormatError, match="truncated"):
        ptio.load_tensor(tmp_path / "trunc.ptcn")
    (tmp_path / "extra.ptcn").write_bytes(raw + b"\0")
    with pytest.raises(ptio.FormatError, match="trailing"):
        ptio.load_tensor(tmp_path / "extra.ptcn")
    (tmp_path / "magic.ptcn").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ptio.FormatError, match="magic"):
        ptio.load_tensor(tmp_path / "magic.ptcn")
    (tmp_path / "ver.ptcn").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(ptio.FormatError, match="version"):
        ptio.load_tensor(tmp_path / "ver.ptcn")
    (tmp_path / "code.ptcn").write_bytes(raw[:8] + struct.pack("<I", 7) + raw[12:])
    with pytest.raises(ptio.FormatError, match="dtype"):
        ptio.load_tensor(tmp_path / "code.ptcn")


def test_integer_arrays_are_stored_as_f32():
    assert ptio.tensor_bytes(np.array([1, 2], dtype=np.int64))[8:12] == struct.pack("<I", 0)


def test_checkpoint_layout_and_round_trip(tmp_path):
    entries = {"a.w": np.ones((2, 2), dtype=np.float32), "opt.a.w": np.full(3, 0.25)}
    blob = ptio.checkpoint_bytes(entries, 17)
    assert blob.startswith(b"PTCKPT1\n" + struct.pack("<I", 2) + struct.pack("<H", 3) + b"a.w" + b"PTCN")
    assert blob.endswith(struct.pack("<Q", 17))
    p = tmp_path / "c.ptckpt"
    ptio.save_checkpoint(p, entries, 17)
    back, it = ptio.load_checkpoint(p)
    assert it == 17 and list(back) == list(entries)
    for k in entries:
        assert back[k].tobytes() == entries[k].tobytes() and back[k].dtype == entries[k].dtype


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTACKPT")
    with pytest.raises(ptio.FormatError):
        ptio.load_checkpoint(p)


def test_atomic_save_leaves_no_temp_files(tmp_path):
    ptio.save_checkpoint(tmp_path / "c.ptckpt", {"w": np.zeros(3)}, 0)
    ptio.save_checkpoint(tmp_path / "c.ptckpt", {"w": np.ones(3)}, 1)
    assert [q.name for q in tmp_path.iterdir()] == ["c.ptckpt"]
    assert ptio.load_checkpoint(tmp_path / "c.ptckpt")[1] == 1


def test_failed_write_keeps_previous_file(tmp_path, monkeypatch):
    p = tmp_path / "c.ptckpt"
    ptio.save_checkpoint(p, {"w": np.zeros(3)}, 5)
    before = p.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(ptio.os, "replace", boom)
    with pytest.raises(OSError):
        ptio.save_checkpoint(p, {"w": np.ones(3)}, 6)
    assert p.read_bytes() == before
    assert [q.name for q in tmp_path.iterdir()] == ["c.ptckpt"]


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    ptio.save_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n") and len(raw) == len(b"P5\n7 5\n255\n") + 35
    np.testing.assert_array_equal(ptio.load_pgm(tmp_path / "a.pgm"), img)


def test_pgm_readable_by_pillow(tmp_path, rng):
    Image = pytest.importorskip("PIL.Image")
    img = rng.integers(0, 256, (4, 6)).astype(np.uint8)
    ptio.save_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "a.pgm")), img)


def test_to_uint8():
    np.testing.assert_array_equal(ptio.to_uint8([0.0, 0.5, 1.0]), [0, 128, 255])
    np.testing.assert_array_equal(ptio.to_uint8(np.full((2, 2), 3.0)), 0)
