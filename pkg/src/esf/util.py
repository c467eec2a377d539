"""Shared helpers: CRC32C, a stable 64-bit hash, and tag-length-value packing."""

from __future__ import annotations

import hashlib
import struct
from typing import Iterator

import numpy as np

_CRC32C_POLY = 0x82F63B78  # Castagnoli polynomial, reflected form


def _make_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint32)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ _CRC32C_POLY if c & 1 else c >> 1
        table[i] = c
    return table


_TABLE = _make_table()

try:
    import numba
    from numba import types as _nbt

    _sig = _nbt.uint32(_nbt.Array(_nbt.uint8, 1, "C", readonly=True), _nbt.uint32)

    @numba.njit(_sig, cache=True)
    def _crc_update(buf, crc):  # pragma: no cover - exercised through crc32c()
        for b in buf:
            crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
        return crc

    def _crc_bytes(data: bytes, crc: int) -> int:
        return int(_crc_update(np.frombuffer(data, dtype=np.uint8), np.uint32(crc)))

except ImportError:  # pragma: no cover - numba is a declared dependency
    _TABLE_LIST = [int(x) for x in _TABLE]

    def _crc_bytes(data: bytes, crc: int) -> int:
        table = _TABLE_LIST
        for b in data:
            crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
        return crc


def crc32c(data: bytes, value: int = 0) -> int:
    """CRC32C of data, optionally continuing from a previous value."""
    return _crc_bytes(bytes(data) if not isinstance(data, bytes) else data,
                      value ^ 0xFFFFFFFF) ^ 0xFFFFFFFF


def hash64(*parts: int) -> int:
    """Stable 64-bit hash of a tuple of integers.

    Identical across processes and platforms (unlike builtin hash), so it is
    safe to use for reproducible per-record seeds.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(struct.pack("<Q", p & 0xFFFFFFFFFFFFFFFF))
    return int.from_bytes(h.digest(), "little")


def tlv_pack(tag: int, data: bytes) -> bytes:
    """One tag-length-value field: u8 tag, u32 LE length, payload."""
    return struct.pack("<BI", tag, len(data)) + data


def tlv_iter(buf: bytes) -> Iterator[tuple[int, bytes]]:
    """Yield (tag, value) fields from a TLV-encoded buffer.

    Raises FormatError on a field that overruns the buffer.
    """
    from .errors import FormatError

    view = memoryview(buf)
    pos = 0
    end = len(view)
    while pos < end:
        if end - pos < 5:
            raise FormatError(f"dangling TLV header at byte {pos}")
        tag, length = struct.unpack_from("<BI", view, pos)
        pos += 5
        if end - pos < length:
            raise FormatError(f"TLV field overruns buffer at byte {pos}")
        yield tag, bytes(view[pos:pos + length])
        pos += length
