"""Tuned desk-scale profiles.

``default``: the full-size generator (50k train examples over 20 days plus
the 7-day eval window, 5 slots x 40 tokens so the unified sequence is 200).
``replay``: a reduced profile sized for the full autonomous-loop replay in
minutes; same planted structure, shorter sequences.
"""

from __future__ import annotations

from .generator import GeneratorSpec
from .orchestrator import LoopConfig
from .modelcfg import preset_variant

DEFAULT_SEED = 7


def default_spec() -> GeneratorSpec:
    return GeneratorSpec(days=27, examples_per_day=2500,
                         dense_dim=20, num_topics=8, num_brands=6,
                         vocab_size=10009, num_items=4800,
                         max_seq_len=40, min_seq_len=3)


def replay_spec() -> GeneratorSpec:
    return GeneratorSpec(days=15, examples_per_day=2000,
                         dense_dim=20, num_topics=8, num_brands=6,
                         vocab_size=3001, num_items=1440,
                         max_seq_len=10, min_seq_len=2)


PROFILES = {"default": default_spec, "replay": replay_spec}


def spec_for_profile(name: str) -> GeneratorSpec:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name]()


def replay_loop_config(**overrides) -> LoopConfig:
    kw = dict(threshold=0.5, budget_gpu_hours=2.0, seed=DEFAULT_SEED,
              batch_size=64, base_lr=0.006,
              initial_variant=preset_variant("V2"), clock="logical")
    kw.update(overrides)
    return LoopConfig(**kw)
