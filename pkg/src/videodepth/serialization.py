"""GEMT binary tensor files.

Layout (all little-endian)::

    b"GEMT" | u16 version (=1) | u16 rank | rank x u64 dims | f32 row-major payload

Reading rejects wrong magic, unknown versions and truncated or oversized
payloads with :class:`CheckpointError`.
"""

import struct
from pathlib import Path

import numpy as np

from src.videodepth.errors import CheckpointError

MAGIC = b"GEMT"
VERSION = 1
_HEADER = struct.Struct("<4sHH")


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array as GEMT bytes (values stored as float32)."""
    array = np.asarray(array)
    header = _HEADER.pack(MAGIC, VERSION, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return header + dims + payload


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse GEMT bytes back into a float32 array."""
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{source}: truncated GEMT header")
    magic, version, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported GEMT version {version}")
    offset = _HEADER.size
    dims_size = 8 * rank
    if len(blob) < offset + dims_size:
        raise CheckpointError(f"{source}: truncated dimension table")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += dims_size
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + 4 * count
    if len(blob) != expected:
        raise CheckpointError(
            f"{source}: payload is {len(blob) - offset} bytes, "
            f"expected {4 * count} for shape {shape}"
        )
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(
        np.float32
    )


def write_tensor(path: str | Path, array: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Tensor file not found: {path}")
    return decode_tensor(path.read_bytes(), source=str(path))
