"""Binary checkpoint container.

Layout, all little-endian:

    magic   4 bytes  b"SDLB"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated count times:
        name_len u32
        name     name_len bytes, UTF-8
        rank     u32
        extents  rank x u32
        values   prod(extents) x f32

Entries are written name-sorted, so save(load(save(x))) is byte-identical.
"""

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"SDLB"
VERSION = 1


def save(path, entries):
    """Write a {name: float array} mapping; returns the byte count."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype=np.float32)
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw))
        blob += raw
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load(path):
    """Read a container back into {name: float32 array}; strict parsing."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointError("truncated container header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}", offset=0)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", offset=4)
    pos = 12
    out = {}
    for _ in range(count):
        if pos + 4 > len(blob):
            raise CheckpointError("truncated entry name length", offset=pos)
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + name_len > len(blob):
            raise CheckpointError("truncated entry name", offset=pos)
        try:
            name = blob[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"undecodable entry name: {e}", offset=pos) from e
        pos += name_len
        if pos + 4 > len(blob):
            raise CheckpointError("truncated rank", offset=pos)
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank}", offset=pos - 4)
        if pos + 4 * rank > len(blob):
            raise CheckpointError("truncated extents", offset=pos)
        extents = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        nbytes = 4 * n
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated values for {name!r}", offset=pos)
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype="<f4").reshape(extents)
        out[name] = arr.astype(np.float32, copy=True)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes", offset=pos)
    return out
