"""Variant configurations: points in the architecture/hyperparameter space.

A VariantConfig is a node identity in the lineage tree; everything a model
build needs beyond the data dims lives here, and it round-trips through a
flat key=value form embedded in memory documents.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from enum import Enum


class SequenceMode(Enum):
    MEAN_POOL = "MeanPool"
    SEPARATE_PER_SLOT = "SeparatePerSlot"
    UNIFIED = "Unified"


class InvalidConfig(ValueError):
    """Construction-time rejection naming the violated invariant."""


TRANSFORMER_TOGGLES = ("positional_encoding", "attention_pooling",
                       "slot_type_embeddings", "temporal_embeddings")


@dataclass(frozen=True)
class VariantConfig:
    version_tag: str
    sequence_mode: SequenceMode
    positional_encoding: bool = False
    attention_pooling: bool = False
    slot_type_embeddings: bool = False
    temporal_embeddings: bool = False
    embed_dim: int = 16
    num_heads: int = 1
    num_layers: int = 1
    dcn_cross_layers: int = 2
    moe_experts: int = 4
    parent_tag: str | None = None

    def __post_init__(self):
        if self.sequence_mode == SequenceMode.MEAN_POOL:
            on = [t for t in TRANSFORMER_TOGGLES if getattr(self, t)]
            if on:
                raise InvalidConfig(
                    f"MeanPool mode forbids transformer-only toggles: {', '.join(on)}")
        for name in ("embed_dim", "num_heads", "num_layers",
                     "dcn_cross_layers", "moe_experts"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.embed_dim % self.num_heads != 0:
            raise InvalidConfig(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    def effective_seq_len(self, num_slots: int, max_seq_len: int) -> int | None:
        if self.sequence_mode == SequenceMode.MEAN_POOL:
            return None
        if self.sequence_mode == SequenceMode.SEPARATE_PER_SLOT:
            return max_seq_len
        return num_slots * max_seq_len

    def with_tag(self, tag: str, parent: str | None = None) -> "VariantConfig":
        return replace(self, version_tag=tag,
                       parent_tag=parent if parent is not None else self.parent_tag)

    def to_kv(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, SequenceMode):
                v = v.value
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "VariantConfig":
        kwargs: dict = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "sequence_mode":
                kwargs[f.name] = SequenceMode(raw)
            elif f.name in TRANSFORMER_TOGGLES:
                kwargs[f.name] = raw == "true"
            elif f.name in ("version_tag", "parent_tag"):
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def preset_variant(tag: str, **overrides) -> VariantConfig:
    """The V1..V3.5 architecture family at desk-scale default dims."""
    base = dict(version_tag=tag)
    lineage = {
        "V1": dict(sequence_mode=SequenceMode.MEAN_POOL),
        "V2": dict(sequence_mode=SequenceMode.SEPARATE_PER_SLOT, parent_tag="V1"),
        "V3.0": dict(sequence_mode=SequenceMode.SEPARATE_PER_SLOT, parent_tag="V2",
                     positional_encoding=True, attention_pooling=True),
        "V3.1": dict(sequence_mode=SequenceMode.UNIFIED, parent_tag="V2"),
        "V3.2": dict(sequence_mode=SequenceMode.UNIFIED, parent_tag="V3.1"),
        "V3.3": dict(sequence_mode=SequenceMode.UNIFIED, parent_tag="V3.2",
                     slot_type_embeddings=True),
        "V3.4": dict(sequence_mode=SequenceMode.UNIFIED, parent_tag="V3.3",
                     slot_type_embeddings=True, temporal_embeddings=True),
        "V3.5": dict(sequence_mode=SequenceMode.UNIFIED, parent_tag="V3.4",
                     slot_type_embeddings=True, temporal_embeddings=True),
    }
    if tag not in lineage:
        raise InvalidConfig(f"unknown preset {tag!r}; choose from {sorted(lineage)}")
    base.update(lineage[tag])
    base.update(overrides)
    return VariantConfig(**base)
