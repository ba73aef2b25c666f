"""On-disk formats: PTCN tensor blobs, PTCKPT1 checkpoints and PGM images.

PTCN layout (all little-endian)::

    b"PTCN" | u32 version=1 | u32 dtype (0=f32, 1=f64) | u32 rank | rank x u64 extents | payload

Checkpoint layout::

    b"PTCKPT1\\n" | u32 entry count | per entry: u16 name length, UTF-8 name, PTCN blob | u64 iteration
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"PTCN"
VERSION = 1
CKPT_MAGIC = b"PTCKPT1\n"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor_to(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; PTCN stores f32 or f64")
    fh.write(MAGIC)
    fh.write(struct.pack("<III", VERSION, _CODES[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_from(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, code, rank = struct.unpack("<III", _read_exact(fh, 12))
    if version != VERSION:
        raise FormatError(f"unsupported PTCN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="), copy=True)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor_to(buf, arr)
    return buf.getvalue()


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr) -> None:
    _atomic_write(path, tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor_from(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr


def checkpoint_bytes(entries: dict, iteration: int) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor_to(buf, arr)
    buf.write(struct.pack("<Q", int(iteration)))
    return buf.getvalue()


def save_checkpoint(path, entries: dict, iteration: int) -> None:
    """Write via temp file + rename so an interrupted save never clobbers the old file."""
    _atomic_write(path, checkpoint_bytes(entries, iteration))


def load_checkpoint(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a PTCKPT1 checkpoint")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, n).decode("utf-8")
            entries[name] = read_tensor_from(fh)
        (iteration,) = struct.unpack("<Q", _read_exact(fh, 8))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after iteration counter")
    return entries, iteration


def save_pgm(path, img) -> None:
    """Binary (P5) 8-bit grayscale image; ``img`` is uint8 H x W."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {img.shape}")
    img = np.clip(img, 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, header + img.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM supported")
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def to_uint8(values) -> np.ndarray:
    """Min-max scale an array to [0, 255]; a constant array maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
