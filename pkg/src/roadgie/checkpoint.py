"""Binary checkpoint format for named parameter tensors.

Layout (little endian): magic "RGIE", format version u32, tensor count u32,
then per tensor: name length u32 + UTF-8 name, rank u32, dims u32 each,
raw float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RGIE"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write a {name: ndarray-like} mapping to `path`."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        # canonical name order: identical states produce identical bytes
        for name in sorted(tensors):
            arr = tensors[name]
            data = np.asarray(arr, dtype="<f4")
            shape = data.shape  # ascontiguousarray promotes 0-d to 1-d
            data = np.ascontiguousarray(data)
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into {name: float32 ndarray}."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
        try:
            version, count = struct.unpack("<II", f.read(8))
            if version != VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            out = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<I", f.read(4))
                name = f.read(nlen).decode("utf-8")
                (rank,) = struct.unpack("<I", f.read(4))
                dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
                n = int(np.prod(dims)) if rank else 1
                payload = f.read(4 * n)
                if len(payload) != 4 * n:
                    raise ValueError(f"{path}: truncated tensor payload for {name!r}")
                out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            return out
        except struct.error as exc:
            raise ValueError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc
