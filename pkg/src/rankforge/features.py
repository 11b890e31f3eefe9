"""Search-log feature space: dense context vector, hashed slot sequences,
and the 10-signal behavior label layout.

Signals 0-2 are click / conversion / grouped-conversion for the
point-of-interest scene, 3-5 the same for the popularity scene, 6-9 are
auxiliary real-valued engagement in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

PAD_ID = 0  # reserved hashed id, never produced for a real token

BEHAVIORS = ("click", "conversion", "grouped_conversion")


class SceneId(Enum):
    POINT_OF_INTEREST = 0
    POPULARITY_BASED = 1


def signal_index(behavior: str, scene: SceneId) -> int:
    """Index into the label vector for one of the six AUC-bearing signals."""
    if behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior {behavior!r}")
    return scene.value * 3 + BEHAVIORS.index(behavior)


BINARY_SIGNALS = tuple(range(6))
AUX_SIGNALS = (6, 7, 8, 9)


@dataclass(frozen=True)
class SlotToken:
    hashed_id: int
    time_delta_bucket: int


@dataclass(frozen=True)
class SlotSequence:
    slot_index: int
    tokens: tuple[SlotToken, ...]  # oldest first, latest last; length <= L


@dataclass(eq=False)
class Example:
    query_id: int
    scene: SceneId
    day: int
    dense: np.ndarray
    sequences: tuple[SlotSequence, ...]
    labels: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (self.query_id == other.query_id and self.scene == other.scene
                and self.day == other.day
                and np.array_equal(self.dense, other.dense)
                and self.sequences == other.sequences
                and np.array_equal(self.labels, other.labels))

    def validate(self, num_slots: int, max_seq_len: int, num_signals: int,
                 vocab_size: int, num_time_buckets: int):
        if self.day < 1:
            raise ValueError(f"day must be >= 1, got {self.day}")
        slots = [s.slot_index for s in self.sequences]
        if slots != list(range(num_slots)):
            raise ValueError(f"expected slot indices 0..{num_slots - 1}, got {slots}")
        for seq in self.sequences:
            if len(seq.tokens) > max_seq_len:
                raise ValueError(f"slot {seq.slot_index} has {len(seq.tokens)} tokens > {max_seq_len}")
            for tok in seq.tokens:
                if not (PAD_ID < tok.hashed_id < vocab_size):
                    raise ValueError(f"hashed_id {tok.hashed_id} outside [1, {vocab_size})")
                if not (0 <= tok.time_delta_bucket < num_time_buckets):
                    raise ValueError(f"time bucket {tok.time_delta_bucket} outside [0, {num_time_buckets})")
        if self.labels.shape != (num_signals,):
            raise ValueError(f"labels shape {self.labels.shape} != ({num_signals},)")
        binary = self.labels[list(BINARY_SIGNALS)]
        if not np.all((binary == 0.0) | (binary == 1.0)):
            raise ValueError("binary signals must be exactly 0 or 1")
        if np.any(self.labels < 0.0) or np.any(self.labels > 1.0):
            raise ValueError("labels must lie in [0, 1]")


def bucketize(value: float, boundaries: Sequence[float]) -> int:
    """Count of boundaries <= value; ties go to the right bucket."""
    b = np.asarray(boundaries, dtype=np.float64)
    if b.ndim != 1 or (b.size > 1 and not np.all(np.diff(b) > 0)):
        raise ValueError("boundaries must be strictly increasing")
    return int(np.searchsorted(b, value, side="right"))


def exponential_boundaries(num_buckets: int) -> np.ndarray:
    """Powers-of-two boundaries (1, 2, 4, ...) giving ``num_buckets`` buckets."""
    if num_buckets < 2:
        raise ValueError("need at least 2 buckets")
    return np.power(2.0, np.arange(num_buckets - 1))


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_token(raw: bytes, slot: int, vocab_size: int) -> int:
    """Deterministic token id in [1, vocab_size); slots use independent salts."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    salted = struct.pack("<Q", slot & _MASK64) + raw
    return fnv1a64(salted) % (vocab_size - 1) + 1


@dataclass
class PackedDay:
    """Columnar layout of one day of examples; the training-side view.

    token_ids / time_buckets / mask have shape (n, S, L); pad positions hold
    PAD_ID, bucket 0, mask 0.
    """

    day: int
    query_id: np.ndarray     # (n,) uint64
    scene: np.ndarray        # (n,) uint8, SceneId values
    dense: np.ndarray        # (n, D) float64
    token_ids: np.ndarray    # (n, S, L) int32
    time_buckets: np.ndarray  # (n, S, L) int16
    mask: np.ndarray         # (n, S, L) float64
    labels: np.ndarray       # (n, J) float64
    oracle: np.ndarray | None = None  # (n, 6) planted-rule posterior per cell

    def __len__(self):
        return self.query_id.shape[0]

    def example(self, i: int) -> Example:
        seqs = []
        for k in range(self.token_ids.shape[1]):
            live = self.mask[i, k] > 0
            toks = tuple(SlotToken(int(t), int(b))
                         for t, b in zip(self.token_ids[i, k][live],
                                         self.time_buckets[i, k][live]))
            seqs.append(SlotSequence(k, toks))
        return Example(
            query_id=int(self.query_id[i]),
            scene=SceneId(int(self.scene[i])),
            day=self.day,
            dense=self.dense[i].copy(),
            sequences=tuple(seqs),
            labels=self.labels[i].copy(),
        )

    def iter_examples(self):
        for i in range(len(self)):
            yield self.example(i)


@dataclass(frozen=True)
class DataDims:
    """Shape of the feature space a model is built against."""

    dense_dim: int
    num_slots: int
    max_seq_len: int
    num_signals: int
    vocab_size: int
    num_time_buckets: int


@dataclass(frozen=True)
class DatasetSplit:
    """Contiguous train-day range plus exactly the next 7 unseen days."""

    train_days: tuple[int, ...]
    eval_days: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.eval_days) != 7:
            raise ValueError(f"eval window must be exactly 7 days, got {len(self.eval_days)}")
        if self.eval_days[0] != self.train_days[-1] + 1:
            raise ValueError("eval window must start the day after training ends")
