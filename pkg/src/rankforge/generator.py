"""Seeded synthetic search-log generator with planted structure.

Labels come from a planted relevance rule: recency-weighted conjunctive
matches (a history token counts only when its topic AND brand both equal
the query's) aggregated per slot with per-slot weights, one of them
negative.  Topic-only distractor tokens make the conjunction essential, so
per-token interaction, slot identity, and recency all carry real signal.
Conversions are strict subsets of clicks; grouped conversion aggregates
conversions over a query group.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .features import (PAD_ID, PackedDay, exponential_boundaries, hash_token,
                       signal_index, SceneId)


@dataclass
class GeneratorSpec:
    dense_dim: int = 16
    num_slots: int = 5
    max_seq_len: int = 40
    num_signals: int = 10
    vocab_size: int = 10009
    num_time_buckets: int = 32
    days: int = 28
    examples_per_day: int = 2000
    eval_tail_days: int = 0        # this many trailing days use the eval density
    eval_examples_per_day: int = 0  # 0 means same density as training days
    num_topics: int = 6
    num_brands: int = 4
    num_items: int = 4000
    min_seq_len: int = 3
    group_size_max: int = 3
    slot_weights: tuple = (1.6, 1.1, 0.7, 0.4, -1.2)
    slot_match_rates: tuple = (0.30, 0.25, 0.20, 0.15, 0.25)
    slot_distractor_rates: tuple = (0.30, 0.30, 0.30, 0.30, 0.30)
    recency_decay: float = 0.65
    max_delta_pow: float = 14.0
    click_sharpness: float = 4.5
    conv_sharpness: float = 3.2
    click_base_rate: float = 0.2   # per scene; signal-0 marginal rate is half of this
    conv_rate_given_click: float = 0.3
    dense_coef: float = 0.35
    aux_noise: float = 0.8

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if self.examples_per_day < 1:
            raise ValueError("examples_per_day must be >= 1")
        for rates in (self.slot_weights, self.slot_match_rates, self.slot_distractor_rates):
            if len(rates) != self.num_slots:
                raise ValueError("per-slot weights/rates must have one entry per slot")
        if not (1 <= self.min_seq_len <= self.max_seq_len):
            raise ValueError("need 1 <= min_seq_len <= max_seq_len")
        if self.num_topics + self.num_brands + 2 >= self.dense_dim:
            raise ValueError("dense_dim too small for topic/brand/scene one-hots")
        if self.vocab_size < 2 or self.num_items < self.num_topics * self.num_brands:
            raise ValueError("vocab/items too small")
        self.slot_weights = tuple(float(w) for w in self.slot_weights)
        self.slot_match_rates = tuple(float(r) for r in self.slot_match_rates)
        self.slot_distractor_rates = tuple(float(r) for r in self.slot_distractor_rates)

    def to_kv(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(repr(x) for x in v)
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "GeneratorSpec":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if isinstance(f.default, tuple):
                kwargs[f.name] = tuple(float(x) for x in raw.split(","))
            elif isinstance(f.default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)

    def item_topic(self, items):
        return items % self.num_topics

    def item_brand(self, items):
        return (items // self.num_topics) % self.num_brands

    def spec_hash(self) -> str:
        canon = ";".join(f"{k}={v}" for k, v in sorted(self.to_kv().items()))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def dims(self):
        from .features import DataDims
        return DataDims(dense_dim=self.dense_dim, num_slots=self.num_slots,
                        max_seq_len=self.max_seq_len, num_signals=self.num_signals,
                        vocab_size=self.vocab_size,
                        num_time_buckets=self.num_time_buckets)


def _rng_for(seed: int, *parts) -> np.random.Generator:
    tag = ":".join(str(p) for p in (seed,) + parts)
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=np.frombuffer(digest, dtype=np.uint64)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class _Calibration:
    """Latent-score normalization and label thresholds, fixed per (spec, seed)."""

    def __init__(self, spec: GeneratorSpec, seed: int):
        z, _ = _latents(spec, _rng_for(seed, "calibration"), 20000)
        self.mean = float(z.mean())
        self.std = float(z.std()) or 1.0
        zn = (z - self.mean) / self.std
        self.click_offset = _bisect_offset(
            lambda q: _sigmoid(spec.click_sharpness * (zn - q)).mean(),
            spec.click_base_rate)
        p_click = _sigmoid(spec.click_sharpness * (zn - self.click_offset))
        self.conv_offset = _bisect_offset(
            lambda q: float(np.average(_sigmoid(spec.conv_sharpness * (zn - q)), weights=p_click)),
            spec.conv_rate_given_click)


def _bisect_offset(rate_fn, target, lo=-20.0, hi=20.0):
    # rate_fn is decreasing in the offset
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if rate_fn(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


_CALIB_CACHE: dict = {}


def _calibration(spec: GeneratorSpec, seed: int) -> _Calibration:
    key = (spec.spec_hash(), seed)
    if key not in _CALIB_CACHE:
        _CALIB_CACHE[key] = _Calibration(spec, seed)
    return _CALIB_CACHE[key]


_HASH_CACHE: dict = {}


def _item_hash_table(spec: GeneratorSpec) -> np.ndarray:
    """(S, num_items) table of per-slot hashed ids for every raw item."""
    key = (spec.num_slots, spec.num_items, spec.vocab_size)
    if key not in _HASH_CACHE:
        table = np.empty((spec.num_slots, spec.num_items), dtype=np.int32)
        for k in range(spec.num_slots):
            for item in range(spec.num_items):
                table[k, item] = hash_token(b"item:%d" % item, k, spec.vocab_size)
        _HASH_CACHE[key] = table
    return _HASH_CACHE[key]


def _latents(spec: GeneratorSpec, rng: np.random.Generator, n: int):
    """Sample n member latents z and the per-slot match strengths (n, S)."""
    draw = _draw_members(spec, rng, n)
    return draw["z"], draw


def _draw_members(spec: GeneratorSpec, rng: np.random.Generator, n: int,
                  topics=None, brands=None) -> dict:
    S, L, T, B = spec.num_slots, spec.max_seq_len, spec.num_topics, spec.num_brands
    if topics is None:
        topics = rng.integers(0, T, size=n)
    if brands is None:
        brands = rng.integers(0, B, size=n)
    lengths = rng.integers(spec.min_seq_len, L + 1, size=(n, S))
    pos = np.arange(L)
    live = pos[None, None, :] < lengths[:, :, None]

    # token mix per position: full conjunctive match, topic-only distractor,
    # or a uniformly random item
    match_rates = np.asarray(spec.slot_match_rates)[None, :, None]
    distractor_rates = np.asarray(spec.slot_distractor_rates)[None, :, None]
    roll = rng.random((n, S, L))
    full = roll < match_rates
    distract = (roll >= match_rates) & (roll < match_rates + distractor_rates)

    items = rng.integers(0, spec.num_items, size=(n, S, L))
    per_pair = spec.num_items // (T * B)
    qt = topics[:, None, None]
    qb = brands[:, None, None]
    full_items = qt + T * (qb + B * rng.integers(0, per_pair, size=(n, S, L)))
    per_topic = spec.num_items // T
    distractor_items = qt + T * rng.integers(0, per_topic, size=(n, S, L))
    items = np.where(full, full_items, np.where(distract, distractor_items, items))

    # time deltas: log-uniform over bucket range, sorted oldest-first
    u = rng.uniform(-1.0, spec.max_delta_pow, size=(n, S, L))
    deltas = np.power(2.0, u)
    deltas[~live] = -1.0
    order = np.argsort(-deltas, axis=-1, kind="stable")
    deltas = np.take_along_axis(deltas, order, axis=-1)
    items = np.take_along_axis(items, order, axis=-1)  # items iid; reorder for coherence
    live = np.take_along_axis(live, order, axis=-1)

    boundaries = exponential_boundaries(spec.num_time_buckets)
    buckets = np.searchsorted(boundaries, deltas, side="right")
    buckets[~live] = 0

    matched = ((spec.item_topic(items) == qt) & (spec.item_brand(items) == qb) & live)
    weights = np.power(spec.recency_decay, buckets)
    # recency-weighted conjunctive match rate, normalized by sequence length
    m = (matched * weights).sum(axis=-1) / np.maximum(lengths, 1)  # (n, S)

    dense_aux = rng.normal(size=(n, spec.dense_dim - T - B - 2))
    z = m @ np.asarray(spec.slot_weights) + spec.dense_coef * dense_aux[:, 0]
    return {
        "topics": topics, "brands": brands, "lengths": lengths, "items": items,
        "live": live, "buckets": buckets, "m": m, "dense_aux": dense_aux, "z": z,
    }


def generate_day(spec: GeneratorSpec, seed: int, day: int,
                 with_oracle: bool = False) -> PackedDay:
    """Pure function of (spec, seed, day): one day of packed examples."""
    if not (1 <= day <= spec.days):
        raise ValueError(f"day {day} outside 1..{spec.days}")
    rng = _rng_for(seed, "day", day)
    n = spec.examples_per_day
    if (spec.eval_tail_days and spec.eval_examples_per_day
            and day > spec.days - spec.eval_tail_days):
        n = spec.eval_examples_per_day
    S, L, T, J = spec.num_slots, spec.max_seq_len, spec.num_topics, spec.num_signals

    # query groups: contiguous runs sharing (query_id, topic, scene)
    sizes = rng.integers(1, spec.group_size_max + 1, size=n)
    ends = np.cumsum(sizes)
    n_groups = int(np.searchsorted(ends, n)) + 1
    sizes = sizes[:n_groups]
    sizes[-1] -= int(ends[n_groups - 1] - n)
    group_of = np.repeat(np.arange(n_groups), sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    group_topics = rng.integers(0, T, size=n_groups)
    group_brands = rng.integers(0, spec.num_brands, size=n_groups)
    group_scene = rng.integers(0, 2, size=n_groups)
    topics = group_topics[group_of]
    brands = group_brands[group_of]
    scene = group_scene[group_of].astype(np.uint8)

    draw = _draw_members(spec, rng, n, topics=topics, brands=brands)
    calib = _calibration(spec, seed)
    zn = (draw["z"] - calib.mean) / calib.std

    p_click = _sigmoid(spec.click_sharpness * (zn - calib.click_offset))
    p_cv = _sigmoid(spec.conv_sharpness * (zn - calib.conv_offset))
    click = (rng.random(n) < p_click).astype(np.float64)
    conv = click * (rng.random(n) < p_cv)

    p_conv = p_click * p_cv
    grouped = np.zeros(n)
    p_grouped = np.zeros(n)
    for g in range(n_groups):
        sl = slice(starts[g], starts[g] + sizes[g])
        grouped[sl] = float(conv[sl].max())
        p_grouped[sl] = 1.0 - np.prod(1.0 - p_conv[sl])

    labels = np.zeros((n, J))
    rows = np.arange(n)
    scene_base = scene.astype(np.int64) * 3
    labels[rows, scene_base + 0] = click
    labels[rows, scene_base + 1] = conv
    labels[rows, scene_base + 2] = grouped
    noise = rng.normal(size=(n, 3)) * spec.aux_noise
    labels[:, 6] = _sigmoid(1.2 * zn + noise[:, 0])
    labels[:, 7] = _sigmoid((draw["m"][:, 0] - draw["m"][:, 0].mean()) + noise[:, 1])
    labels[:, 8] = _sigmoid(0.6 * zn - 0.4 * (draw["m"][:, -1]) + noise[:, 2])
    labels[:, 9] = rng.random(n)

    dense = np.zeros((n, spec.dense_dim))
    dense[rows, topics] = 1.0
    dense[rows, T + brands] = 1.0
    dense[rows, T + spec.num_brands + scene] = 1.0
    dense[:, T + spec.num_brands + 2:] = draw["dense_aux"]

    table = _item_hash_table(spec)
    token_ids = np.where(draw["live"],
                         table[np.arange(S)[None, :, None], draw["items"]],
                         PAD_ID).astype(np.int32)
    buckets = np.where(draw["live"], draw["buckets"], 0).astype(np.int16)
    mask = draw["live"].astype(np.float64)

    oracle = None
    if with_oracle:
        oracle = np.zeros((n, 6))
        for b, p in zip(("click", "conversion", "grouped_conversion"),
                        (p_click, p_conv, p_grouped)):
            for sc in SceneId:
                idx = signal_index(b, sc)
                oracle[:, idx] = p  # only same-scene rows are ever read

    query_id = (np.uint64(day) * np.uint64(10 ** 7) + group_of.astype(np.uint64))
    return PackedDay(day=day, query_id=query_id, scene=scene, dense=dense,
                     token_ids=token_ids, time_buckets=buckets, mask=mask,
                     labels=labels, oracle=oracle)


def generate_dataset(spec: GeneratorSpec, seed: int,
                     with_oracle: bool = False) -> Iterator[PackedDay]:
    for day in range(1, spec.days + 1):
        yield generate_day(spec, seed, day, with_oracle=with_oracle)
