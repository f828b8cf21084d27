"""Shared primitives for the binary container formats.

All multi-byte integers are little-endian. JSON blocks are UTF-8,
length-prefixed with a u32, and serialized canonically (sorted keys, no
whitespace) so identical content produces identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Bad magic, version, length, or checksum in a binary container."""


def write_u8(f: BinaryIO, value: int):
    f.write(struct.pack("<B", value))


def write_u16(f: BinaryIO, value: int):
    f.write(struct.pack("<H", value))


def write_u32(f: BinaryIO, value: int):
    f.write(struct.pack("<I", value))


def write_u64(f: BinaryIO, value: int):
    f.write(struct.pack("<Q", value))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def read_u8(f: BinaryIO) -> int:
    return struct.unpack("<B", _read_exact(f, 1))[0]


def read_u16(f: BinaryIO) -> int:
    return struct.unpack("<H", _read_exact(f, 2))[0]


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def read_u64(f: BinaryIO) -> int:
    return struct.unpack("<Q", _read_exact(f, 8))[0]


def write_magic(f: BinaryIO, magic: bytes, version: int):
    assert len(magic) == 4
    f.write(magic)
    write_u32(f, version)


def read_magic(f: BinaryIO, magic: bytes, max_version: int) -> int:
    got = _read_exact(f, 4)
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    version = read_u32(f)
    if not 1 <= version <= max_version:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_json_block(f: BinaryIO, obj):
    blob = canonical_json(obj)
    write_u32(f, len(blob))
    f.write(blob)


def read_json_block(f: BinaryIO):
    length = read_u32(f)
    blob = _read_exact(f, length)
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt JSON block: {exc}") from exc


def write_f32_array(f: BinaryIO, arr: np.ndarray):
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_array(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    data = _read_exact(f, count * 4)
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def payload_crc(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def write_crc(f: BinaryIO, payload: bytes):
    write_u32(f, payload_crc(payload))


def check_crc(f: BinaryIO, payload: bytes):
    stored = read_u32(f)
    actual = payload_crc(payload)
    if stored != actual:
        raise FormatError(f"checksum mismatch: stored {stored:#010x}, actual {actual:#010x}")
