"""Named parameter storage and the ``M2O1`` checkpoint format."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .array import ContractError, DiffArray

MAGIC = b"M2O1"


class CheckpointFormatError(ValueError):
    pass


class ParamStore:
    """Map from dotted parameter path to a leaf :class:`DiffArray`.

    Iteration is always in sorted-name order so that anything folded over the
    store (gradient accumulation, checkpoint bytes, counts) is reproducible.
    """

    def __init__(self, arrays: dict[str, DiffArray] | None = None, rng_seed: int = 0):
        self._arrays: dict[str, DiffArray] = {}
        self.rng_seed = int(rng_seed)
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(value, DiffArray):
            value = DiffArray(value)
        value.requires_grad = True
        self._arrays[name] = value

    def __getitem__(self, name: str) -> DiffArray:
        try:
            return self._arrays[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._arrays)

    def items(self) -> list[tuple[str, DiffArray]]:
        return [(n, self._arrays[n]) for n in self.names()]

    def with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self.names() if n.startswith(prefix)]

    def num_scalars(self) -> int:
        return sum(int(a.size) for a in self._arrays.values())

    def zero_grad(self) -> None:
        for a in self._arrays.values():
            a.grad = None

    def fill_missing_grads(self) -> None:
        for a in self._arrays.values():
            if a.grad is None:
                a.grad = np.zeros_like(a.data)

    def copy(self) -> "ParamStore":
        return ParamStore({n: DiffArray(a.data.copy(), dtype=a.data.dtype) for n, a in self.items()},
                          rng_seed=self.rng_seed)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({n: DiffArray(a.data, dtype=dtype) for n, a in self.items()},
                          rng_seed=self.rng_seed)

    def state(self) -> dict[str, np.ndarray]:
        return {n: a.data for n, a in self.items()}

    # -- checkpoint io ------------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self))]
        for name, arr in self.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr.data, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, rng_seed: int = 0) -> "ParamStore":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise CheckpointFormatError("bad checkpoint magic (expected M2O1)")
        pos = 4

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointFormatError("truncated checkpoint")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        (count,) = struct.unpack("<I", take(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = bytes(take(nlen)).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
            arrays[name] = DiffArray(values.astype(np.float32), dtype=np.float32)
        if pos != len(view):
            raise CheckpointFormatError("trailing bytes after checkpoint entries")
        return cls(arrays, rng_seed=rng_seed)

    def save(self, path) -> int:
        """Write the checkpoint; returns the number of scalars written."""
        Path(path).write_bytes(self.to_bytes())
        return self.num_scalars()

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())


def require_same_layout(a: ParamStore, b: ParamStore) -> None:
    if a.names() != b.names():
        missing = sorted(set(a.names()) ^ set(b.names()))
        raise ContractError(f"parameter names differ: {missing[:5]}")
    for name in a.names():
        if a[name].shape != b[name].shape:
            raise ContractError(f"{name}: shape {a[name].shape} vs {b[name].shape}")
