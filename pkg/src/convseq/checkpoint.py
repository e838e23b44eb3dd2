"""Binary checkpoint serialization.

Layout: magic bytes ``CVRC``, format version as u32 little-endian, then one
record per array until EOF. Each record is name length (u64 LE), the UTF-8
name, rank (u64), each dimension (u64), then the raw float64 data in
little-endian row-major order. Records are written sorted by name and the
round-trip is bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CVRC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or mismatched.

    Byte-level parse failures carry the offset of the problem; semantic
    failures (missing or misshapen parameters) have no meaningful offset.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    if len(blob) < 8:
        raise CheckpointError("truncated header", len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4)
    arrays: dict[str, np.ndarray] = {}
    pos = 8
    total = len(blob)

    def take(n: int, what: str) -> int:
        nonlocal pos
        if pos + n > total:
            raise CheckpointError(f"truncated while reading {what}", pos)
        start = pos
        pos += n
        return start

    while pos < total:
        (name_len,) = struct.unpack_from("<Q", blob, take(8, "name length"))
        start = take(name_len, "name")
        try:
            name = blob[start : start + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("name is not valid UTF-8", start) from None
        (rank,) = struct.unpack_from("<Q", blob, take(8, "rank"))
        dims = []
        for _ in range(rank):
            (d,) = struct.unpack_from("<Q", blob, take(8, "dimensions"))
            dims.append(d)
        count = 1
        for d in dims:
            count *= d
        start = take(8 * count, f"data of {name!r}")
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[name] = data.reshape(dims).astype(np.float64)
    return arrays
