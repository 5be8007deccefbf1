"""Binary codec shared by the model and dataset file formats.

Layout conventions (all integers little-endian):
  file     = magic(4 bytes) | version u16 | u32 header length | UTF-8 JSON header | body
  tensor   = rank u8 | dims u32 each | row-major float64 payload
Decode errors name the byte offset at which the file stopped making sense.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a binary file is corrupt; message carries the offset."""


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    pos = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes for {what} at offset {pos}, got {len(buf)}")
    return buf


def write_header(f: BinaryIO, magic: bytes, version: int, header: dict) -> None:
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<H", version))
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def read_header(f: BinaryIO, magic: bytes, expected_version: int) -> dict:
    got = _read_exact(f, len(magic), "magic")
    if got != magic:
        raise FormatError(f"bad magic at offset 0: expected {magic!r}, got {got!r}")
    (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
    if version != expected_version:
        raise FormatError(f"unsupported format version {version} at offset {len(magic)}")
    (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
    raw = _read_exact(f, hlen, "JSON header")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header at offset {len(magic) + 6}: {exc}") from exc


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 255:
        raise ValueError("tensor rank exceeds format limit")
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<B", _read_exact(f, 1, "tensor rank"))
    dims = []
    for i in range(rank):
        (d,) = struct.unpack("<I", _read_exact(f, 4, f"tensor dim {i}"))
        dims.append(d)
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(f, 8 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
