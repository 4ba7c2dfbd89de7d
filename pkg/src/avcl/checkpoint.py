"""Flat binary container of named float64 tensors.

Entry layout (all integers little-endian unsigned 64-bit):

    [name_len u64][name utf-8][rank u64][extent u64 x rank][payload f64 ...]

The payload is the tensor's C-order raw little-endian float64 bytes, so a
write/read round-trip is bit-exact. A file is just the concatenation of its
entries; readers consume until EOF. Names must be unique within a file.
"""

from __future__ import annotations

import io
import struct

import numpy as np

_U64 = struct.Struct("<Q")
_F64LE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Malformed container bytes or invalid entry set."""


def write_entries(fh, tensors: dict[str, np.ndarray]) -> int:
    """Append entries to a binary file handle; returns bytes written."""
    written = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim and not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        nb = name.encode("utf-8")
        fh.write(_U64.pack(len(nb)))
        fh.write(nb)
        fh.write(_U64.pack(a.ndim))
        for ext in a.shape:
            fh.write(_U64.pack(ext))
        payload = a.astype(_F64LE, copy=False).tobytes(order="C")
        fh.write(payload)
        written += 8 + len(nb) + 8 + 8 * a.ndim + len(payload)
    return written


def read_entries(fh) -> dict[str, np.ndarray]:
    """Read entries until EOF. Duplicate names are an error."""
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(8)
        if head == b"":
            break
        if len(head) != 8:
            raise CheckpointError("truncated entry header")
        (name_len,) = _U64.unpack(head)
        nb = fh.read(name_len)
        if len(nb) != name_len:
            raise CheckpointError("truncated entry name")
        name = nb.decode("utf-8")
        rank_b = fh.read(8)
        if len(rank_b) != 8:
            raise CheckpointError("truncated rank")
        (rank,) = _U64.unpack(rank_b)
        ext_b = fh.read(8 * rank)
        if len(ext_b) != 8 * rank:
            raise CheckpointError("truncated extents")
        shape = tuple(_U64.unpack_from(ext_b, 8 * i)[0] for i in range(rank))
        count = 1
        for s in shape:
            count *= s
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise CheckpointError("truncated payload")
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(payload, dtype=_F64LE, count=count).astype(np.float64)
        out[name] = arr.reshape(shape).copy(order="C")
    return out


def serialized_size(tensors: dict[str, np.ndarray]) -> int:
    """Exact byte size the entries would occupy on disk."""
    total = 0
    for name, arr in tensors.items():
        a = np.asarray(arr)
        total += 8 + len(name.encode("utf-8")) + 8 + 8 * a.ndim + 8 * a.size
    return total


def save(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_entries(fh, tensors)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_entries(fh)


def to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_entries(buf, tensors)
    return buf.getvalue()


def from_bytes(data: bytes) -> dict[str, np.ndarray]:
    return read_entries(io.BytesIO(data))
