"""Little-endian binary helpers shared by the checkpoint, mask and dataset formats."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

from .errors import BadMagicError, FormatError, TruncatedError

__all__ = ["FormatError", "Reader", "atomic_write", "pack_name", "pack_shape"]


def pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {name[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def pack_shape(shape) -> bytes:
    if len(shape) > 0xFF:
        raise FormatError("rank exceeds 255")
    return struct.pack("<B", len(shape)) + b"".join(struct.pack("<I", int(d)) for d in shape)


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a sibling temporary file, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def magic(self, expected: bytes) -> None:
        if len(self.data) < len(expected):
            raise TruncatedError("file shorter than its magic number")
        got = self.take(len(expected))
        if got != expected:
            raise BadMagicError(f"bad magic {got!r}, expected {expected!r}")

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 name at offset {self.pos}") from exc

    def shape(self) -> tuple:
        (rank,) = self.unpack("<B")
        return tuple(self.unpack(f"<{rank}I")) if rank else ()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")
