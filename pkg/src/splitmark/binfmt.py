"""Framing helpers shared by the SMK1/SMD1/SMW1/SMT1 binary formats.

Every file is ``magic (4 bytes) | payload | crc32(payload) as u32 LE``.
The payload always starts with a u16 LE format version.  All integers are
little-endian and all real arrays are stored as f32 LE in row-major order.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError, UnsupportedVersionError

FORMAT_VERSION = 1


def frame(magic: bytes, payload: bytes) -> bytes:
    return magic + payload + struct.pack("<I", zlib.crc32(payload))


def unframe(magic: bytes, blob: bytes) -> "Reader":
    """Check magic, CRC and version; return a reader positioned after the version."""
    if len(blob) < 4 + 2 + 4:
        raise FormatError(f"truncated {magic.decode()} blob ({len(blob)} bytes)")
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    payload, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{magic.decode()} CRC mismatch (truncated or corrupt)")
    reader = Reader(payload)
    version = reader.u16()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{magic.decode()} version {version} unsupported (expected {FORMAT_VERSION})"
        )
    return reader


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = [struct.pack("<H", FORMAT_VERSION)]

    def pack(self, fmt: str, *values) -> "Writer":
        self._parts.append(struct.pack("<" + fmt, *values))
        return self

    def u8(self, v: int) -> "Writer":
        return self.pack("B", v)

    def u16(self, v: int) -> "Writer":
        return self.pack("H", v)

    def u32(self, v: int) -> "Writer":
        return self.pack("I", v)

    def u64(self, v: int) -> "Writer":
        return self.pack("Q", v)

    def f32(self, v: float) -> "Writer":
        return self.pack("f", v)

    def dims(self, shape) -> "Writer":
        self.u8(len(shape))
        for d in shape:
            self.u32(int(d))
        return self

    def array_f32(self, arr) -> "Writer":
        self._parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return self

    def array_u16(self, arr) -> "Writer":
        self._parts.append(np.ascontiguousarray(arr, dtype="<u2").tobytes())
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(data)
        return self

    def payload(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, payload: bytes) -> None:
        self._buf = memoryview(payload)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._buf):
            raise FormatError("payload ends before declared content")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self._take(size))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def f32(self) -> float:
        return self.unpack("f")[0]

    def dims(self) -> tuple[int, ...]:
        rank = self.u8()
        return tuple(self.u32() for _ in range(rank))

    def array_f32(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        data = self._take(4 * count)
        return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)

    def array_u16(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(2 * count), dtype="<u2").astype(np.int64)

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def done(self) -> None:
        if self._pos != len(self._buf):
            raise FormatError(f"{len(self._buf) - self._pos} trailing bytes in payload")
