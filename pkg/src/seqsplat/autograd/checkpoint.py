"""``SSCK`` checkpoint files: named float64 arrays, little-endian."""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"SSCK"


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_checkpoint(state):
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_checkpoint(buf):
    if buf[:4] != MAGIC:
        raise ValueError("not an SSCK checkpoint (bad magic)")
    off = 4
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        state[name] = arr.astype(np.float64)
    if off != len(buf):
        raise ValueError(f"trailing bytes in checkpoint at offset {off}")
    return state


def save_checkpoint(state, path):
    atomic_write_bytes(path, dumps_checkpoint(state))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
