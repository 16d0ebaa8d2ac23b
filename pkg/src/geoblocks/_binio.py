"""Framed little-endian binary files: magic, version, body, trailing CRC32."""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import ChecksumMismatch, FormatVersionMismatch, IoError


class Writer:
    def __init__(self):
        self._chunks: list[bytes] = []

    def u8(self, v: int):
        self._chunks.append(struct.pack("<B", v))

    def u16(self, v: int):
        self._chunks.append(struct.pack("<H", v))

    def u32(self, v: int):
        self._chunks.append(struct.pack("<I", v))

    def u64(self, v: int):
        self._chunks.append(struct.pack("<Q", v))

    def i64(self, v: int):
        self._chunks.append(struct.pack("<q", v))

    def f64(self, v: float):
        self._chunks.append(struct.pack("<d", v))

    def raw(self, b: bytes):
        self._chunks.append(bytes(b))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def array(self, arr: np.ndarray):
        self.raw(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())

    def finish(self, magic: bytes, version: int) -> bytes:
        body = b"".join(self._chunks)
        return magic + struct.pack("<H", version) + body + struct.pack("<I", zlib.crc32(body))


class Reader:
    def __init__(self, body: memoryview):
        self._buf = body
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._buf):
            raise ChecksumMismatch("file body shorter than its header promises")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def text(self) -> str:
        return bytes(self._take(self.u16())).decode("utf-8")

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self._take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype), copy=True)

    def done(self) -> bool:
        return self._pos == len(self._buf)


def write_file(path, magic: bytes, version: int, w: Writer):
    try:
        with open(path, "wb") as f:
            f.write(w.finish(magic, version))
    except OSError as e:
        raise IoError(str(e)) from e


def read_file(path, magic: bytes, version: int) -> Reader:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    if len(blob) < len(magic) + 6:
        raise ChecksumMismatch(f"{path}: file too short")
    if blob[: len(magic)] != magic:
        raise FormatVersionMismatch(f"{path}: bad magic {blob[:len(magic)]!r}")
    got_version = struct.unpack_from("<H", blob, len(magic))[0]
    if got_version != version:
        raise FormatVersionMismatch(f"{path}: format version {got_version}, expected {version}")
    body = memoryview(blob)[len(magic) + 2 : -4]
    crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    return Reader(body)
