"""Tests for GEMT tensor files."""

import struct

import numpy as np
import pytest

from src.videodepth.errors import CheckpointError
from src.videodepth.serialization import (
    MAGIC,
    decode_tensor,
    encode_tensor,
    read_tensor,
    write_tensor,
)


class TestEncoding:
    """Byte layout of the format."""

    def test_header_layout(self):
        """Test magic, version, rank and dimensions at their offsets."""
        blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
        assert blob[:4] == MAGIC
        assert struct.unpack_from("<HH", blob, 4) == (1, 2)
        assert struct.unpack_from("<2Q", blob, 8) == (2, 3)
        assert len(blob) == 8 + 16 + 4 * 6

    def test_payload_is_little_endian_float32(self):
        """Test that values are stored row-major as <f4."""
        blob = encode_tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(np.frombuffer(blob[-16:], dtype="<f4"), [1, 2, 3, 4])

    def test_scalar(self):
        """Test a rank-0 tensor."""
        out = decode_tensor(encode_tensor(np.float32(7.5)))
        assert out.shape == ()
        assert out == 7.5

    def test_bitwise_round_trip(self, rng, tmp_path):
        """Test that float32 data round-trips bit for bit through a file."""
        data = rng.normal(size=(3, 4, 5)).astype(np.float32)
        data[0, 0, 0] = -0.0
        write_tensor(tmp_path / "sub" / "x.gemt", data)
        out = read_tensor(tmp_path / "sub" / "x.gemt")
        assert out.dtype == np.float32
        assert out.tobytes() == data.tobytes()


class TestDecodingErrors:
    """Corrupt files are rejected with CheckpointError."""

    def test_bad_magic(self):
        """Test that a wrong magic is rejected."""
        blob = b"NOPE" + encode_tensor(np.zeros(2))[4:]
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_tensor(blob)

    def test_unknown_version(self):
        """Test that an unknown version is rejected."""
        blob = bytearray(encode_tensor(np.zeros(2)))
        struct.pack_into("<H", blob, 4, 9)
        with pytest.raises(CheckpointError, match="version 9"):
            decode_tensor(bytes(blob))

    @pytest.mark.parametrize("cut", [2, 10, 30])
    def test_truncated(self, cut):
        """Test that truncated files are rejected wherever they are cut."""
        blob = encode_tensor(np.zeros((2, 2)))
        with pytest.raises(CheckpointError, match="truncated|payload"):
            decode_tensor(blob[:cut])

    def test_trailing_bytes(self):
        """Test that an oversized payload is rejected."""
        with pytest.raises(CheckpointError, match="payload"):
            decode_tensor(encode_tensor(np.zeros(3)) + b"\x00\x00\x00\x00")

    def test_missing_file(self, tmp_path):
        """Test that reading a missing file raises CheckpointError."""
        with pytest.raises(CheckpointError, match="not found"):
            read_tensor(tmp_path / "absent.gemt")
