"""Little-endian binary codec helpers.

All on-disk artifacts (FPLN, VEMB, RGPM, LORA, DENS, PCCH) share the same
building blocks: a 4-byte magic, a u32 version, u32 counts and typed
little-endian payloads. ``BinaryWriter`` and ``BinaryReader`` wrap a byte
buffer so that each format reads as a sequence of field calls.
"""

from __future__ import annotations

import io
import struct

import numpy as np


class FormatError(ValueError):
    """Raised when a binary artifact is malformed or has the wrong magic/version."""
    pass


class BinaryWriter:
    """Accumulate little-endian fields into a byte buffer."""

    def __init__(self) -> None:
        self._buffer = io.BytesIO()

    def header(self, magic: bytes, version: int) -> None:
        if len(magic) != 4:
            raise FormatError(f"magic must be 4 bytes, got {magic!r}")
        self._buffer.write(magic)
        self.u32(version)

    def u32(self, value: int) -> None:
        self._buffer.write(struct.pack("<I", int(value)))

    def u64(self, value: int) -> None:
        self._buffer.write(struct.pack("<Q", int(value)))

    def f64(self, value: float) -> None:
        self._buffer.write(struct.pack("<d", float(value)))

    def array(self, values: np.ndarray, dtype: str) -> None:
        """Write ``values`` flattened in C order as ``dtype`` (e.g. ``"<f4"``)."""
        self._buffer.write(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return self._buffer.getvalue()

    def save(self, path: str) -> None:
        with open(path, "wb") as handle:
            handle.write(self.getvalue())


class BinaryReader:
    """Read little-endian fields from bytes, failing loudly on truncation."""

    def __init__(self, data: bytes, source: str = "<bytes>"):
        self._data = data
        self._offset = 0
        self.source = source

    @classmethod
    def from_file(cls, path: str) -> "BinaryReader":
        with open(path, "rb") as handle:
            return cls(handle.read(), source=path)

    def _take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._data):
            raise FormatError(
                f"{self.source}: truncated at byte {self._offset} (needed {size} more bytes)"
            )
        chunk = self._data[self._offset:end]
        self._offset = end
        return chunk

    def header(self, magic: bytes, version: int) -> None:
        found = self._take(4)
        if found != magic:
            raise FormatError(f"{self.source}: expected magic {magic!r}, found {found!r}")
        found_version = self.u32()
        if found_version != version:
            raise FormatError(
                f"{self.source}: unsupported {magic.decode()} version {found_version} (expected {version})"
            )

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def array(self, count: int, dtype: str) -> np.ndarray:
        """Read ``count`` elements of ``dtype``; returns a writable native array."""
        itemsize = np.dtype(dtype).itemsize
        values = np.frombuffer(self._take(count * itemsize), dtype=dtype)
        return values.astype(values.dtype.newbyteorder("="), copy=True)

    def at_end(self) -> bool:
        return self._offset == len(self._data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise FormatError(
                f"{self.source}: {len(self._data) - self._offset} trailing bytes after payload"
            )
