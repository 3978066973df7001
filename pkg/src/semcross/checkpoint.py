"""Binary tensor container used for checkpoints and tensor-valued dataset
items.

Layout: the 4 magic bytes ``SCT1``, then zero or more entries back to
back, each being

    name length   u32 little-endian
    name          UTF-8, that many bytes
    rank          u32
    dims          rank u32 values
    payload       prod(dims) float32 values, little-endian

No count field and no padding; readers consume entries until EOF. Writers
emit entries in sorted name order so identical state always produces an
identical file.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SCT1"
_MAX_NAME = 4096
_MAX_RANK = 32


def write_tensors(path, entries):
    """Write a name -> array mapping; arrays are cast to float32."""
    with open(path, "wb") as fh:
        fh.write(dump_tensors(entries))


def dump_tensors(entries):
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def read_tensors(path):
    """Read a container back into a name -> float32 array dict."""
    with open(path, "rb") as fh:
        return load_tensors(fh.read(), source=str(path))


def load_tensors(blob, source="<bytes>"):
    if blob[:4] != MAGIC:
        raise FormatError(f"{source}: not a tensor container (bad magic {blob[:4]!r})")
    entries = {}
    pos = 4
    end = len(blob)

    def take(n, what):
        nonlocal pos
        if pos + n > end:
            raise FormatError(f"{source}: truncated while reading {what} at offset {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < end:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        if name_len == 0 or name_len > _MAX_NAME:
            raise FormatError(f"{source}: implausible name length {name_len} at offset {pos - 4}")
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{source}: entry name is not valid UTF-8 ({e})") from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > _MAX_RANK:
            raise FormatError(f"{source}: implausible rank {rank} for entry {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        count = 1
        for d in dims:
            count *= d
        payload = take(4 * count, f"payload of {name!r}")
        if name in entries:
            raise FormatError(f"{source}: duplicate entry name {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return entries
