import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from msnowcast.fileformat import (
    FormatError,
    decode_checkpoint,
    decode_sequence,
    encode_checkpoint,
    encode_sequence,
    load_checkpoint,
    save_checkpoint,
)

frames_strategy = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=5),
    elements=st.floats(-100, 100, width=32),
)


@settings(max_examples=40, deadline=None)
@given(frames=frames_strategy, start=st.integers(-1000, 1000), step=st.integers(1, 30))
def test_sequence_round_trip_bit_identical(frames, start, step):
    offsets = start + step * np.arange(frames.shape[0])
    buf = encode_sequence(frames, offsets, 1.5)
    back, off, km = decode_sequence(buf)
    assert back.tobytes() == frames.tobytes()
    np.testing.assert_array_equal(off, offsets)
    assert km == 1.5
    assert encode_sequence(back, off, km) == buf


def test_sequence_layout_is_little_endian():
    buf = encode_sequence(np.ones((1, 2, 3), np.float32), [7], 1.0)
    assert buf[:4] == b"NWRS"
    assert struct.unpack("<HIIIf", buf[4:22]) == (1, 1, 2, 3, 1.0)
    assert struct.unpack("<i", buf[22:26]) == (7,)
    assert len(buf) == 26 + 6 * 4


def test_corrupt_magic_rejected():
    buf = bytearray(encode_sequence(np.zeros((1, 2, 2), np.float32), [0]))
    buf[0:4] = b"XXXX"
    with pytest.raises(FormatError) as e:
        decode_sequence(bytes(buf))
    assert e.value.offset == 0


def test_empty_frame_list_rejected():
    with pytest.raises(FormatError):
        encode_sequence(np.zeros((0, 2, 2), np.float32), [])
    bad = b"NWRS" + struct.pack("<HIIIf", 1, 0, 2, 2, 1.0)
    with pytest.raises(FormatError):
        decode_sequence(bad)


def test_truncation_and_trailing_bytes_rejected():
    buf = encode_sequence(np.zeros((2, 2, 2), np.float32), [0, 1])
    with pytest.raises(FormatError):
        decode_sequence(buf[:-1])
    with pytest.raises(FormatError):
        decode_sequence(buf + b"\0")


def test_non_monotone_offsets_rejected():
    buf = bytearray(encode_sequence(np.zeros((2, 1, 1), np.float32), [0, 5]))
    buf[26:30] = struct.pack("<i", -1)
    with pytest.raises(FormatError):
        decode_sequence(bytes(buf))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(2, 3)).astype(np.float32), "bias": np.zeros(4), "scalar-ish": np.ones(1, np.float32)}
    save_checkpoint(tmp_path / "x.msnc", arrays)
    back = load_checkpoint(tmp_path / "x.msnc")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(back[k], arrays[k])
    assert not (tmp_path / "x.msnc.tmp").exists()


def test_checkpoint_rejects_bad_input():
    with pytest.raises(FormatError):
        encode_checkpoint({"i": np.zeros(2, np.int32)})
    buf = encode_checkpoint({"w": np.zeros(3, np.float32)})
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:-2])
    with pytest.raises(FormatError):
        decode_checkpoint(b"MSNX" + buf[4:])
