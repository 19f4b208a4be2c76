"""Binary containers: NWRS radar sequences and MSNC parameter checkpoints.

Both are little-endian.

NWRS: b"NWRS", u16 version, u32 T, u32 H, u32 W, f32 cell_km,
      T x i32 minute offsets, T*H*W x f32 frames (row-major).
MSNC: b"MSNC", u16 version, u32 record count, then per record
      u16 name length, utf-8 name, u8 dtype code, u8 ndim, ndim x u32 dims,
      raw payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

NWRS_MAGIC = b"NWRS"
MSNC_MAGIC = b"MSNC"
NWRS_VERSION = 1
MSNC_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def _atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def encode_sequence(frames: np.ndarray, minute_offsets, cell_km: float = 1.0) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise FormatError(f"frames must be [T,H,W], got shape {frames.shape}")
    t, h, w = frames.shape
    if t < 1:
        raise FormatError("a sequence needs at least one frame")
    offsets = np.asarray(minute_offsets, dtype="<i4")
    if offsets.shape != (t,):
        raise FormatError(f"{offsets.size} minute offsets for {t} frames")
    if np.any(np.diff(offsets) <= 0):
        raise FormatError("minute offsets must be strictly increasing")
    head = NWRS_MAGIC + struct.pack("<HIIIf", NWRS_VERSION, t, h, w, cell_km)
    return head + offsets.tobytes() + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_sequence(buf: bytes) -> tuple[np.ndarray, np.ndarray, float]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != NWRS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != NWRS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    t, h, w = r.unpack("<III", "dimensions")
    if t < 1:
        raise FormatError("frame count must be >= 1", 6)
    (cell_km,) = r.unpack("<f", "cell size")
    off_pos = r.pos
    offsets = np.frombuffer(r.take(4 * t, "minute offsets"), dtype="<i4").astype(np.int64)
    bad = np.nonzero(np.diff(offsets) <= 0)[0]
    if bad.size:
        raise FormatError("minute offsets not strictly increasing", off_pos + 4 * (int(bad[0]) + 1))
    frames = np.frombuffer(r.take(4 * t * h * w, "frame payload"), dtype="<f4").reshape(t, h, w).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return frames, offsets, float(cell_km)


def write_sequence_file(path, frames, minute_offsets, cell_km: float = 1.0) -> None:
    _atomic_write(path, encode_sequence(frames, minute_offsets, cell_km))


def read_sequence_file(path) -> tuple[np.ndarray, np.ndarray, float]:
    return decode_sequence(Path(path).read_bytes())


def encode_checkpoint(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MSNC_MAGIC, struct.pack("<HI", MSNC_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MSNC_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    version, count = r.unpack("<HI", "header")
    if version != MSNC_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        code_pos = r.pos
        code, ndim = r.unpack("<BB", "dtype/ndim")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", code_pos)
        shape = r.unpack(f"<{ndim}I", "shape")
        dt = _CODE_DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(r.take(size, f"payload of {name!r}"), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return out


def save_checkpoint(path, params) -> None:
    """``params`` maps names to arrays or Tensors."""
    arrays = {k: getattr(v, "data", v) for k, v in params.items()}
    _atomic_write(path, encode_checkpoint(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
