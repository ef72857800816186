"""Bit-exact binary checkpoints.

Layout, all little-endian after the magic:

    "PSNT" | version u32 | tensor count u32 |
    per tensor: name_len u32, name utf-8, rank u32, dims u64 each,
                data f64 |
    crc32 u32 over every preceding byte

Float payloads round-trip bitwise; the CRC turns silent corruption into
a load-time error.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = [
    "CheckpointError",
    "CrcMismatchError",
    "FormatError",
    "ShapeMismatchError",
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "load_into_model",
]

MAGIC = b"PSNT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(path: str, named_arrays: list[tuple[str, np.ndarray]]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, len(named_arrays))
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.astype("<f8", copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as f:
        f.write(buf)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated (needed {n} bytes at offset {self.off})")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out


def load_checkpoint(path: str) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 12:
        raise FormatError(f"{path}: file too short for a checkpoint")
    body, crc_bytes = raw[:-4], raw[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) != stored_crc:
        raise CrcMismatchError(f"{path}: CRC mismatch, file is corrupt")

    r = _Reader(body, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count = struct.unpack("<II", r.take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4))
        name = r.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", r.take(4))
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * n_vals), dtype="<f8").reshape(dims).copy()
        out.append((name, arr))
    if r.off != len(body):
        raise FormatError(f"{path}: {len(body) - r.off} trailing bytes after last tensor")
    return out


def load_into_model(model, path: str) -> None:
    """Copy a checkpoint into a freshly built model of the same shape."""
    state = dict(model.named_state())
    loaded = load_checkpoint(path)
    loaded_names = [n for n, _ in loaded]
    if sorted(loaded_names) != sorted(state.keys()):
        missing = sorted(set(state) - set(loaded_names))
        extra = sorted(set(loaded_names) - set(state))
        raise ShapeMismatchError(
            f"{path}: parameter names disagree with the configured model"
            f" (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, arr in loaded:
        target = state[name]
        if target.shape != arr.shape:
            raise ShapeMismatchError(
                f"{path}: {name} has shape {arr.shape}, model expects {target.shape}"
            )
        target[...] = arr
