"""Named parameter collections: deterministic init and binary snapshots.

Initialization uses a counter-based generator (Philox) keyed by the global
seed and the parameter's path string, so the same (seed, path) always yields
bitwise-identical values regardless of creation order.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterator

import numpy as np

from .autodiff import Tensor

SNAPSHOT_MAGIC = b"RFTN"
SNAPSHOT_VERSION = 1


def _keyed_generator(seed: int, path: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{path}".encode("utf-8"), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniform_init(seed: int, path: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    rng = _keyed_generator(seed, path)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Flat path -> Tensor mapping holding all learned parameters of a model."""

    def __init__(self, seed: int):
        self.seed = seed
        self._params: dict[str, Tensor] = {}

    def weight(self, path: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        return self._add(path, uniform_init(self.seed, path, shape, fan_in))

    def zeros(self, path: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(path, np.zeros(shape))

    def ones(self, path: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(path, np.ones(shape))

    def _add(self, path: str, values: np.ndarray) -> Tensor:
        if path in self._params:
            raise ValueError(f"duplicate parameter path: {path}")
        t = Tensor(values, requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def param_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def save(self, path: str):
        """Write the RFTN flat binary snapshot format."""
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<I", SNAPSHOT_VERSION))
            for name, t in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", t.values.ndim))
                for d in t.shape:
                    fh.write(struct.pack("<I", d))
                fh.write(t.values.astype("<f8").tobytes())

    def load(self, path: str):
        """Load values from a snapshot; paths and shapes must match exactly."""
        loaded = read_snapshot(path)
        missing = set(self._params) - set(loaded)
        extra = set(loaded) - set(self._params)
        if missing or extra:
            raise ValueError(f"snapshot mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, values in loaded.items():
            t = self._params[name]
            if values.shape != t.shape:
                raise ValueError(f"snapshot shape mismatch for {name}: {values.shape} != {t.shape}")
            t.values = values


def read_snapshot(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"not a parameter snapshot (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims).copy()
            out[name] = values
    return out
