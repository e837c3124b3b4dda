"""
Little-endian readers/writers shared by the STWF and SMCK containers.
"""
import struct

import numpy as np

from errors import DataError, FormatError, IntegrityError


class ByteReader:
    """Sequential reader over an in-memory file; tracks the byte offset."""

    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.raw):
            raise IntegrityError(f"{self.path}: truncated while reading {what}", self.offset)
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what):
        (length,) = self.unpack("<H", f"{what} length")
        start = self.offset
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.path}: {what} at byte offset {start} is not UTF-8") from e

    def floats(self, shape, what):
        count = int(np.prod(shape)) if len(shape) else 1
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").reshape(shape).astype(np.float32)


def read_file(path, what):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"cannot read {what} {path}: {e.strerror or e}") from e


def pack_string(text):
    encoded = text.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded


def pack_floats(array):
    return np.ascontiguousarray(array, dtype="<f4").tobytes()
