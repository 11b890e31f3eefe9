"""Day-sharded dataset files: record-framed binary shards plus a text manifest.

Each record is u32 length followed by little-endian fixed-order fields:
query_id u64, scene u8, day u16, dense D*f64, then per slot (index u8,
count u8, count * (hashed_id u32, bucket u8)), then labels J*f64.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .features import PAD_ID, DatasetSplit, PackedDay
from .generator import GeneratorSpec, generate_day

MANIFEST_NAME = "manifest.txt"
FORMAT_TAG = "rankforge-dataset-v1"


class DataSource:
    """Read-side interface: a spec, a seed, and per-day packed examples."""

    spec: GeneratorSpec
    seed: int

    def day(self, day: int) -> PackedDay:
        raise NotImplementedError

    @property
    def days(self) -> int:
        return self.spec.days


class GeneratedSource(DataSource):
    """Days materialized straight from the generator, no disk involved."""

    def __init__(self, spec: GeneratorSpec, seed: int, with_oracle: bool = False):
        self.spec = spec
        self.seed = seed
        self.with_oracle = with_oracle
        self._cache: dict[int, PackedDay] = {}

    def day(self, day: int) -> PackedDay:
        if day not in self._cache:
            self._cache[day] = generate_day(self.spec, self.seed, day,
                                            with_oracle=self.with_oracle)
        return self._cache[day]


def split_by_day(source: DataSource, train_end_day: int) -> DatasetSplit:
    needed = train_end_day + 7
    if source.days < needed:
        raise ValueError(
            f"dataset covers {source.days} days but train_end_day={train_end_day} "
            f"requires at least {needed}")
    if train_end_day < 1:
        raise ValueError("train_end_day must be >= 1")
    return DatasetSplit(train_days=tuple(range(1, train_end_day + 1)),
                        eval_days=tuple(range(train_end_day + 1, train_end_day + 8)))


def _day_path(data_dir: str, day: int) -> str:
    return os.path.join(data_dir, f"day_{day:04d}.bin")


def write_dataset(spec: GeneratorSpec, seed: int, data_dir: str) -> str:
    """Generate and persist all days plus the manifest; returns the manifest path."""
    os.makedirs(data_dir, exist_ok=True)
    for day in range(1, spec.days + 1):
        packed = generate_day(spec, seed, day)
        write_day(packed, _day_path(data_dir, day))
    manifest = os.path.join(data_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(f"format={FORMAT_TAG}\n")
        fh.write(f"seed={seed}\n")
        fh.write(f"days={spec.days}\n")
        fh.write(f"spec_hash={spec.spec_hash()}\n")
        for k, v in spec.to_kv().items():
            fh.write(f"spec.{k}={v}\n")
    return manifest


def write_day(packed: PackedDay, path: str):
    n, S, L = packed.token_ids.shape
    D = packed.dense.shape[1]
    J = packed.labels.shape[1]
    with open(path, "wb") as fh:
        for i in range(n):
            body = bytearray()
            body += struct.pack("<QBH", int(packed.query_id[i]),
                                int(packed.scene[i]), packed.day)
            body += packed.dense[i].astype("<f8").tobytes()
            for k in range(S):
                live = packed.mask[i, k] > 0
                ids = packed.token_ids[i, k][live]
                buckets = packed.time_buckets[i, k][live]
                body += struct.pack("<BB", k, len(ids))
                for t, b in zip(ids, buckets):
                    body += struct.pack("<IB", int(t), int(b))
            body += packed.labels[i].astype("<f8").tobytes()
            fh.write(struct.pack("<I", len(body)))
            fh.write(bytes(body))


def read_day(path: str, spec: GeneratorSpec) -> PackedDay:
    D, S, L, J = spec.dense_dim, spec.num_slots, spec.max_seq_len, spec.num_signals
    qids, scenes, denses, labels = [], [], [], []
    tok_rows, bkt_rows, msk_rows = [], [], []
    day = 0
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            (rec_len,) = struct.unpack("<I", head)
            body = fh.read(rec_len)
            off = 0
            qid, scene, day = struct.unpack_from("<QBH", body, off)
            off += 11
            dense = np.frombuffer(body, dtype="<f8", count=D, offset=off).copy()
            off += 8 * D
            toks = np.full((S, L), PAD_ID, dtype=np.int32)
            bkts = np.zeros((S, L), dtype=np.int16)
            msk = np.zeros((S, L))
            for _ in range(S):
                k, count = struct.unpack_from("<BB", body, off)
                off += 2
                for p in range(count):
                    t, b = struct.unpack_from("<IB", body, off)
                    off += 5
                    toks[k, p] = t
                    bkts[k, p] = b
                    msk[k, p] = 1.0
            lab = np.frombuffer(body, dtype="<f8", count=J, offset=off).copy()
            qids.append(qid)
            scenes.append(scene)
            denses.append(dense)
            labels.append(lab)
            tok_rows.append(toks)
            bkt_rows.append(bkts)
            msk_rows.append(msk)
    return PackedDay(
        day=day,
        query_id=np.asarray(qids, dtype=np.uint64),
        scene=np.asarray(scenes, dtype=np.uint8),
        dense=np.stack(denses),
        token_ids=np.stack(tok_rows),
        time_buckets=np.stack(bkt_rows),
        mask=np.stack(msk_rows),
        labels=np.stack(labels),
    )


@dataclass
class DiskSource(DataSource):
    """Dataset rooted at a manifest directory (the CLI ``--data-dir``)."""

    data_dir: str

    def __post_init__(self):
        manifest = os.path.join(self.data_dir, MANIFEST_NAME)
        if not os.path.isfile(manifest):
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {self.data_dir}")
        kv = {}
        with open(manifest, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or "=" not in line:
                    continue
                key, value = line.split("=", 1)
                kv[key] = value
        if kv.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported dataset format {kv.get('format')!r}")
        self.seed = int(kv["seed"])
        self.spec = GeneratorSpec.from_kv(
            {k[len("spec."):]: v for k, v in kv.items() if k.startswith("spec.")})
        if kv.get("spec_hash") and kv["spec_hash"] != self.spec.spec_hash():
            raise ValueError("manifest spec_hash does not match spec fields")
        self._cache: dict[int, PackedDay] = {}

    def day(self, day: int) -> PackedDay:
        if day not in self._cache:
            path = _day_path(self.data_dir, day)
            if not os.path.isfile(path):
                raise FileNotFoundError(f"missing shard for day {day}: {path}")
            self._cache[day] = read_day(path, self.spec)
        return self._cache[day]
