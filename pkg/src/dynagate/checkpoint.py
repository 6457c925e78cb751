"""Binary container for named arrays.

Layout, all integers little-endian:

    magic       8 bytes  b"DGTENSR\\x00"
    version     u32      currently 1
    count       u32      number of entries
    manifest    count records of
                    name_len  u16
                    name      name_len bytes, utf-8
                    dtype     u8   0 = float32, 1 = float64, 2 = int64
                    ndim      u8
                    dims      ndim * u32
    payload     raw array bytes, C order, in manifest order

Round-trips are lossless: bytes written for an array equal the bytes
read back, independent of host endianness.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"DGTENSR\x00"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def save_checkpoint(path, arrays):
    """Write a name -> ndarray mapping to ``path``.

    Arrays are converted to little-endian C-contiguous form. Dtypes
    outside {float32, float64, int64} raise CheckpointError, as do
    non-string names and empty mappings with duplicate-prone names
    (dict input makes duplicates impossible; sequences of pairs are
    checked).
    """
    if not isinstance(arrays, dict):
        arrays = dict(arrays)
    manifest = bytearray()
    payload = bytearray()
    items = []
    for name, arr in arrays.items():
        if not isinstance(name, str) or not name:
            raise CheckpointError(f"entry name must be a non-empty string, got {name!r}")
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(
                f"entry {name!r} has unsupported dtype {arr.dtype}; "
                "supported: float32, float64, int64"
            )
        # ascontiguousarray promotes rank-0 to rank-1; undo to keep shape
        items.append((name,
                      np.ascontiguousarray(arr, dtype=dt).reshape(arr.shape)))
    manifest += struct.pack("<I", len(items))
    for name, arr in items:
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"entry name too long ({len(raw_name)} bytes)")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"entry {name!r} has too many dimensions ({arr.ndim})")
        manifest += struct.pack("<H", len(raw_name))
        manifest += raw_name
        manifest += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        for extent in arr.shape:
            manifest += struct.pack("<I", extent)
        payload += arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(bytes(manifest))
        fh.write(bytes(payload))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes for {what}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path):
    """Read a container written by :func:`save_checkpoint`.

    Returns a dict preserving manifest order. Raises CheckpointError
    on bad magic, unknown version, unknown dtype code, truncation, or
    trailing garbage.
    """
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = r.u32("entry count")
    manifest = []
    for i in range(count):
        name_len = r.u16(f"name length of entry {i}")
        name = r.take(name_len, f"name of entry {i}").decode("utf-8")
        code = r.u8(f"dtype of entry {name!r}")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"entry {name!r} has unknown dtype code {code}")
        ndim = r.u8(f"rank of entry {name!r}")
        shape = tuple(r.u32(f"extent of entry {name!r}") for _ in range(ndim))
        manifest.append((name, _CODE_DTYPES[code], shape))
    out = {}
    for name, dt, shape in manifest:
        n_items = 1
        for extent in shape:
            n_items *= extent
        raw = r.take(n_items * dt.itemsize, f"payload of entry {name!r}")
        if name in out:
            raise CheckpointError(f"duplicate entry name {name!r}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after payload")
    return out
