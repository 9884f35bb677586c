"""Binary tensor archive: the single on-disk format for checkpoints, masks,
bundled datasets, and diagnostics tensors.

Layout (all integers little-endian):

    magic "LTKT" | version u32 | entry count u32
    per entry: name length u32 | name UTF-8 | dtype u8 | rank u8
               | extents rank*u32 | row-major payload

dtype codes: 1 = float32, 2 = uint8. Loading validates every length field
before allocating, so a corrupt or truncated file fails with a clear error
(including the byte offset) instead of an allocation blow-up.

Writes are atomic: temp file in the target directory, then rename.
"""

import os
import struct
import tempfile

import numpy as np

from .autograd import Tensor

MAGIC = b"LTKT"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR = {np.dtype("float32"): 1, np.dtype("uint8"): 2}

MAX_NAME = 4096
MAX_RANK = 8


class ArchiveError(ValueError):
    """Malformed archive; message carries the byte offset of the fault."""

    def __init__(self, offset, message):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


def _as_array(name, value):
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    if arr.dtype not in _CODE_FOR:
        raise ValueError(f"entry '{name}': unsupported dtype {arr.dtype} "
                         "(float32 and uint8 only)")
    if any(e <= 0 for e in arr.shape):
        raise ValueError(f"entry '{name}': extents must be positive, got {arr.shape}")
    if not arr.flags.c_contiguous:  # 0-d arrays are contiguous; keep rank 0
        arr = arr.copy()
    return arr


def save_archive(path, tensors):
    """Write named tensors to `path` atomically. Accepts a mapping of
    name -> ndarray or Tensor; float64 input is narrowed to float32."""
    items = []
    seen = set()
    for name, value in tensors.items():
        if not isinstance(name, str) or not name:
            raise ValueError("entry names must be non-empty strings")
        if len(name.encode("utf-8")) > MAX_NAME:
            raise ValueError(f"entry name too long: {name[:50]}...")
        if name in seen:
            raise ValueError(f"duplicate entry name: {name}")
        seen.add(name)
        items.append((name, _as_array(name, value)))

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(items))
    for name, arr in items:
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        if arr.dtype == np.float32:
            blob += arr.astype("<f4", copy=False).tobytes()
        else:
            blob += arr.tobytes()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.buf):
            raise ArchiveError(self.pos, f"truncated while reading {what} "
                               f"({n} bytes needed, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def load_archive(path):
    """Read an archive back into a dict of name -> ndarray (insertion order
    preserved). Every length is validated against the remaining bytes before
    any allocation."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise ArchiveError(0, f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise ArchiveError(4, f"unsupported version {version}")
    count = r.u32("entry count")
    # each entry needs at least name_len + dtype + rank = 6 bytes
    if count * 6 > len(buf) - r.pos:
        raise ArchiveError(8, f"entry count {count} impossible for file of "
                           f"{len(buf)} bytes")
    out = {}
    for _ in range(count):
        at = r.pos
        name_len = r.u32("name length")
        if name_len == 0 or name_len > MAX_NAME:
            raise ArchiveError(at, f"name length {name_len} out of range")
        try:
            name = bytes(r.take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError(at + 4, "entry name is not valid UTF-8")
        if name in out:
            raise ArchiveError(at, f"duplicate entry name: {name}")
        code = r.u8("dtype code")
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise ArchiveError(r.pos - 1, f"unknown dtype code {code}")
        rank = r.u8("rank")
        if rank > MAX_RANK:
            raise ArchiveError(r.pos - 1, f"rank {rank} exceeds {MAX_RANK}")
        shape = []
        for d in range(rank):
            at_ext = r.pos
            e = r.u32(f"extent {d}")
            if e == 0:
                raise ArchiveError(at_ext, f"extent {d} is zero")
            shape.append(e)
        n_items = 1
        for e in shape:
            n_items *= e
        payload_bytes = n_items * dtype.itemsize
        if payload_bytes > len(buf) - r.pos:
            raise ArchiveError(r.pos, f"payload of {payload_bytes} bytes for "
                               f"'{name}' exceeds remaining "
                               f"{len(buf) - r.pos} bytes")
        payload = r.take(payload_bytes, f"payload of '{name}'")
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        if dtype == np.dtype("<f4"):
            arr = arr.astype(np.float32)  # native order, writable copy
        else:
            arr = arr.copy()
        out[name] = arr
    if r.pos != len(buf):
        raise ArchiveError(r.pos, f"{len(buf) - r.pos} trailing bytes after "
                           "last entry")
    return out


def pack_text(text):
    """Encode a string as a uint8 tensor for embedding in an archive."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def unpack_text(arr):
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
