"""Little-endian binary container shared by asset files and network checkpoints.

Layout (all integers unsigned 32-bit little-endian unless noted)::

    magic      4 bytes ASCII ("APGM" for models, "APGN" for networks)
    version    u32
    ...        caller-defined header words
    sections   repeated: tag (4 bytes ASCII), dtype code u32, count u32,
               then ``count`` elements of 4 or 8 bytes each

dtype codes: 1 = float32, 2 = int32, 3 = float64.
"""
import struct

import numpy as np

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<i4"), 3: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("int32"): 2, np.dtype("float64"): 3}


class ModelFormatError(Exception):
    """Base class for every problem found while decoding a container."""


class MalformedHeaderError(ModelFormatError):
    pass


class DimensionMismatchError(ModelFormatError):
    pass


class TruncatedPayloadError(ModelFormatError):
    def __init__(self, section, message=None):
        self.section = section
        super().__init__(message or f"file truncated inside section {section!r}")


class Writer:
    def __init__(self, fh):
        self.fh = fh

    def magic(self, magic: bytes, version: int):
        self.fh.write(magic)
        self.words(version)

    def words(self, *values):
        self.fh.write(struct.pack(f"<{len(values)}I", *values))

    def raw(self, data: bytes):
        self.fh.write(data)

    def section(self, tag: str, array: np.ndarray):
        arr = np.ascontiguousarray(array)
        code = CODE_FOR_DTYPE.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for section {tag!r}")
        self.fh.write(tag.encode("ascii").ljust(4)[:4])
        self.words(code, arr.size)
        self.fh.write(arr.astype(DTYPE_CODES[code], copy=False).tobytes(order="C"))


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n, section):
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(section)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def magic(self, expected: bytes, versions=(1,)) -> int:
        if len(self.data) < 8:
            raise MalformedHeaderError("file too short for a header")
        got = self._take(4, "header")
        if got != expected:
            raise MalformedHeaderError(f"bad magic {got!r}, expected {expected!r}")
        (version,) = self.words(1, "header")
        if version not in versions:
            raise MalformedHeaderError(f"unsupported version {version}")
        return version

    def words(self, n, section="header"):
        return struct.unpack(f"<{n}I", self._take(4 * n, section))

    def raw(self, n, section):
        return self._take(n, section)

    def section(self, tag: str, shape, dtype=None) -> np.ndarray:
        head = self.data[self.pos:self.pos + 4]
        if len(head) < 4:
            raise TruncatedPayloadError(tag)
        got = head.decode("ascii", errors="replace").strip()
        if got != tag.strip():
            raise MalformedHeaderError(f"expected section {tag!r}, found {got!r}")
        self.pos += 4
        code, count = self.words(2, tag)
        if code not in DTYPE_CODES:
            raise MalformedHeaderError(f"unknown dtype code {code} in section {tag!r}")
        if dtype is not None and DTYPE_CODES[code] != np.dtype(dtype).newbyteorder("<"):
            raise DimensionMismatchError(f"section {tag!r} has dtype {DTYPE_CODES[code]}, expected {dtype}")
        expected = int(np.prod(shape)) if shape is not None else count
        if count != expected:
            raise DimensionMismatchError(
                f"section {tag!r} holds {count} elements, header implies {expected}")
        dt = DTYPE_CODES[code]
        payload = self._take(count * dt.itemsize, tag)
        arr = np.frombuffer(payload, dtype=dt).astype(dt.newbyteorder("="))
        return arr.reshape(shape if shape is not None else (count,))

    def finish(self):
        if self.pos != len(self.data):
            raise DimensionMismatchError(
                f"{len(self.data) - self.pos} trailing bytes after the last section")
