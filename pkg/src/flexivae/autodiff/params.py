"""Named parameter collections and their binary file format.

File layout (little-endian)::

    b"FVPS" | version u32 | record*
    record = path_len u32 | path utf-8 | rank u32 | dims u32[rank] | float64[prod(dims)]
"""

from __future__ import annotations

import io
import struct
from collections.abc import MutableMapping
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor

MAGIC = b"FVPS"
VERSION = 1


class ParameterStore(MutableMapping):
    """Ordered map from parameter path to a trainable :class:`Tensor`."""

    def __init__(self, items: dict[str, np.ndarray | Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for key, value in (items or {}).items():
            self[key] = value

    def __getitem__(self, key: str) -> Tensor:
        return self._params[key]

    def __setitem__(self, key: str, value) -> None:
        if not isinstance(key, str) or not key:
            raise ConfigurationError(f"parameter path must be a non-empty string, got {key!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = key
        self._params[key] = t

    def __delitem__(self, key: str) -> None:
        del self._params[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, key: str, value) -> Tensor:
        if key in self._params:
            raise ConfigurationError(f"duplicate parameter path {key!r}")
        self[key] = value
        return self._params[key]

    def subset(self, prefix: str) -> "ParameterStore":
        """A view sharing the same tensors for every path under ``prefix``."""
        store = ParameterStore()
        for key, t in self._params.items():
            if key.startswith(prefix):
                store._params[key] = t
        return store

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._params.items()}

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        for key, t in self._params.items():
            path = key.encode("utf-8")
            buf.write(struct.pack("<I", len(path)))
            buf.write(path)
            buf.write(struct.pack("<I", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        if blob[:4] != MAGIC:
            raise ConfigurationError("not a parameter file (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != VERSION:
            raise ConfigurationError(f"unsupported parameter file version {version}")
        pos = 8
        store = cls()
        while pos < len(blob):
            (plen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            key = blob[pos : pos + plen].decode("utf-8")
            pos += plen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * count
            store.add(key, data)
        return store

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        return cls.from_bytes(Path(path).read_bytes())


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
