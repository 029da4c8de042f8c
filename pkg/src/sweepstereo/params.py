"""Named parameter storage, the Adam update, and checkpoint files.

Checkpoint layout (all integers little-endian):

    magic   4 bytes  b"NR2P"
    version u32      currently 1
    count   u32      number of parameters
    then per parameter, in store order:
        name_len u32
        name     name_len bytes, UTF-8
        dtype    u8      0 = float32, 1 = float64
        rank     u32
        extents  rank * u32
        data     raw little-endian scalars, C order

Round trips are bit-exact. Optimizer moment buffers are not part of the
format; training resumed from a checkpoint restarts them.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = ["ParameterStore", "CheckpointError", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"NR2P"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


class ParameterStore:
    """Uniquely named trainable tensors plus their Adam moment buffers.

    Shapes are immutable after creation. Mutation (gradient accumulation,
    ``adam_step``) is single-writer; concurrent pipelines must use separate
    stores.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def adam_step(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        """One bias-corrected Adam update; clears gradients afterwards.

        Parameters without a gradient this step are left untouched (their
        moments do not advance either).
        """
        self._t += 1
        b1, b2 = betas
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for name, p in self._params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(self.dtype, copy=False)
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[name], self._v[name] = m, v
            else:
                v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.grad = None

    # -- checkpoint io ----------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self._params.items()})

    def load(self, path) -> None:
        """Load a checkpoint into the existing parameters.

        Every stored name must exist with an identical shape; extra or
        missing parameters raise :class:`CheckpointError`.
        """
        loaded = load_checkpoint(path)
        missing = set(self._params) - set(loaded)
        extra = set(loaded) - set(self._params)
        if missing or extra:
            raise CheckpointError(
                f"checkpoint does not match network: missing={sorted(missing)[:4]} "
                f"extra={sorted(extra)[:4]}")
        for name, arr in loaded.items():
            p = self._params[name]
            if p.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: store {p.shape}, file {arr.shape}")
            p.data[...] = arr.astype(self.dtype, copy=False)
        self._m.clear()
        self._v.clear()
        self._t = 0


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", data, off)
        off += 8
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", data, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype tag {tag}")
            dt = _TAG_DTYPES[tag]
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(shape)
            off += n * dt.itemsize
            out[name] = arr.copy()
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from e
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out
