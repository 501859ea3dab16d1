"""ODGC1 binary checkpoint format.

Layout (little-endian): magic ``ODGC1\\n``, u32 entry count, then per entry a
u32 name length, the UTF-8 name, u32 rank, u64 dims[rank], and the f64 data in
row-major order. Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamRegistry, Tensor

MAGIC = b"ODGC1\n"


def save_checkpoint(registry: ParamRegistry, path) -> None:
    chunks = [MAGIC, struct.pack("<I", len(registry))]
    for name, t in registry.items():
        raw = name.encode("utf-8")
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: bad magic, not an ODGC1 checkpoint")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if off + nlen > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        size = 8 * n
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += size
        out[name] = arr.astype(np.float64).copy()
    return out


def load_into_registry(path, registry: ParamRegistry) -> None:
    loaded = load_checkpoint(path)
    for name, t in registry.items():
        if name not in loaded:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if loaded[name].shape != t.data.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {loaded[name].shape}, "
                f"expected {t.data.shape}"
            )
    extra = set(loaded) - set(registry.names())
    if extra:
        raise ValueError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
    for name, t in registry.items():
        t.data = loaded[name]


def registry_from_checkpoint(path) -> ParamRegistry:
    registry = ParamRegistry()
    for name, arr in load_checkpoint(path).items():
        registry.register(name, Tensor(arr, requires_grad=True))
    return registry


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
