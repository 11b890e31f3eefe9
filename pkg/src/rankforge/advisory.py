"""Idea generation and decision voting.

Advisors propose Ideas (typed mutation sets over the current variant config
and schedule) and vote Keep/Fix/Revert when a run does not improve the
metric.  Scripted advisors walk a deterministic exploration catalog so the
whole loop replays offline; the external-LLM adapter lives in
``external_advisor`` and speaks the same machine-block grammar.

The persistence threshold t in [0, 1] follows the convention that higher
values encourage staying on a broken branch: an advisor votes Fix when its
repair expectation is at least 1 - t.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

from .memstore import MemoryIndex
from .modelcfg import (InvalidConfig, SequenceMode, TRANSFORMER_TOGGLES,
                       VariantConfig)
from .schedule import LrSchedule, ScheduleKind, reference_phase_table


class AdvisoryFailure(RuntimeError):
    """No advisor produced a usable reply; the loop pauses for the expert."""


class MutationOp(Enum):
    SET_TOGGLE = "SetToggle"
    SET_SEQUENCE_MODE = "SetSequenceMode"
    SET_SCHEDULE_KIND = "SetScheduleKind"
    SET_SCHEDULE_PARAM = "SetScheduleParam"
    SET_DIM = "SetDim"


DIM_FIELDS = ("embed_dim", "num_heads", "num_layers", "dcn_cross_layers", "moe_experts")


@dataclass(frozen=True)
class Mutation:
    op: MutationOp
    target: str
    value: str

    def render(self) -> str:
        return f"{self.op.value}:{self.target}={self.value}"

    @classmethod
    def parse(cls, text: str) -> "Mutation":
        if ":" not in text or "=" not in text:
            raise ValueError(f"malformed mutation {text!r}; want Op:target=value")
        op_name, rest = text.split(":", 1)
        target, value = rest.split("=", 1)
        try:
            op = MutationOp(op_name)
        except ValueError:
            raise ValueError(f"unknown mutation op {op_name!r}") from None
        return cls(op=op, target=target, value=value)


def _parse_phase_table(raw: str) -> tuple:
    return tuple((float(f), float(lr))
                 for f, lr in (p.split("@") for p in raw.split("|")))


def render_phase_table(table) -> str:
    return "|".join(f"{repr(f)}@{repr(lr)}" for f, lr in table)


def apply_mutations(config: VariantConfig, schedule: LrSchedule,
                    mutations: Sequence[Mutation]):
    """Type-checked application; raises InvalidConfig/ValueError on bad input."""
    cfg_kw: dict = {}
    for m in mutations:
        if m.op == MutationOp.SET_TOGGLE:
            if m.target not in TRANSFORMER_TOGGLES:
                raise InvalidConfig(f"SetToggle target {m.target!r} is not a toggle")
            if m.value not in ("true", "false"):
                raise InvalidConfig(f"SetToggle value must be true/false, got {m.value!r}")
            cfg_kw[m.target] = m.value == "true"
        elif m.op == MutationOp.SET_SEQUENCE_MODE:
            cfg_kw["sequence_mode"] = SequenceMode(m.value)
        elif m.op == MutationOp.SET_DIM:
            if m.target not in DIM_FIELDS:
                raise InvalidConfig(f"SetDim target {m.target!r} unknown")
            cfg_kw[m.target] = int(m.value)
        elif m.op == MutationOp.SET_SCHEDULE_KIND:
            kind = ScheduleKind(m.value)
            table = (reference_phase_table(schedule.base_lr)
                     if kind == ScheduleKind.FOUR_PHASE else ())
            schedule = LrSchedule(kind=kind, base_lr=schedule.base_lr, phase_table=table)
        elif m.op == MutationOp.SET_SCHEDULE_PARAM:
            if m.target == "base_lr":
                table = (reference_phase_table(float(m.value))
                         if schedule.kind == ScheduleKind.FOUR_PHASE else ())
                schedule = LrSchedule(schedule.kind, float(m.value), table)
            elif m.target == "phase_table":
                if schedule.kind != ScheduleKind.FOUR_PHASE:
                    raise InvalidConfig("phase_table only applies to a FourPhase schedule")
                schedule = LrSchedule(schedule.kind, schedule.base_lr,
                                      _parse_phase_table(m.value))
            else:
                raise InvalidConfig(f"SetScheduleParam target {m.target!r} unknown")
    if cfg_kw:
        config = replace(config, **cfg_kw)
    return config, schedule


@dataclass(frozen=True)
class Idea:
    id: str
    description: str
    mutations: tuple
    rationale: str = ""
    proposed_by: tuple = ()
    priority: int = 1_000_000  # scripted catalog rank; external ideas sort last

    def __post_init__(self):
        if not self.mutations:
            raise ValueError("an idea needs at least one mutation")

    def apply(self, config: VariantConfig, schedule: LrSchedule):
        return apply_mutations(config, schedule, self.mutations)

    def to_kv(self) -> dict:
        return {"idea_id": self.id, "description": self.description,
                "mutations": " ".join(m.render() for m in self.mutations),
                "rationale": self.rationale,
                "proposed_by": ",".join(self.proposed_by)}

    @classmethod
    def from_kv(cls, kv: dict, proposed_by=()) -> "Idea":
        muts = tuple(Mutation.parse(tok) for tok in kv["mutations"].split() if tok)
        return cls(id=kv.get("idea_id", kv.get("description", "idea")[:32]),
                   description=kv.get("description", ""), mutations=muts,
                   rationale=kv.get("rationale", ""),
                   proposed_by=tuple(proposed_by) or tuple(
                       x for x in kv.get("proposed_by", "").split(",") if x))


class VoteDecision(Enum):
    FIX = "Fix"
    REVERT = "Revert"


@dataclass(frozen=True)
class Vote:
    advisor_id: str
    decision: VoteDecision
    confidence: float
    note: str = ""

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must lie in [0, 1]")


class Decision(Enum):
    KEEP = "Keep"
    FIX = "Fix"
    REVERT = "Revert"


class ConsensusPolicy(Enum):
    MAJORITY = "Majority"
    UNANIMOUS = "Unanimous"


@dataclass
class AdvisoryContext:
    """Everything an advisor may look at when proposing or voting."""

    index: MemoryIndex
    config: VariantConfig
    schedule: LrSchedule
    last_report: object = None
    metric_delta: float | None = None
    fault: str | None = None
    instability: float = 0.0
    fix_target_tag: str | None = None   # set when repairing a failed branch

    @property
    def fix_mode(self) -> bool:
        return self.fix_target_tag is not None


@dataclass(frozen=True)
class CatalogIdea:
    key: str
    priority: int
    description: str
    rationale: str
    applies: Callable
    build_mutations: Callable
    repair: bool = False

    def idea_id(self, ctx: AdvisoryContext) -> str:
        if self.repair and ctx.fix_target_tag:
            return f"{self.key}@{ctx.fix_target_tag}"
        return self.key


def _catalog() -> tuple:
    """Exploration order of the reference lineage plus the LR repairs."""
    return (
        CatalogIdea(
            key="transformer-separate-sequences", priority=0,
            description="replace mean pooling with per-slot transformer encoders",
            rationale="sequence order and token interactions are invisible to mean pooling",
            applies=lambda ctx: ctx.config.sequence_mode == SequenceMode.MEAN_POOL,
            build_mutations=lambda ctx: (
                Mutation(MutationOp.SET_SEQUENCE_MODE, "sequence_mode", "SeparatePerSlot"),)),
        CatalogIdea(
            key="positional-encoding-attention-pooling", priority=1,
            description="add positional encoding and attention pooling",
            rationale="order-aware encoding plus learned pooling may sharpen summaries",
            applies=lambda ctx: (ctx.config.sequence_mode == SequenceMode.SEPARATE_PER_SLOT
                                 and not ctx.config.positional_encoding
                                 and not ctx.config.attention_pooling),
            build_mutations=lambda ctx: (
                Mutation(MutationOp.SET_TOGGLE, "positional_encoding", "true"),
                Mutation(MutationOp.SET_TOGGLE, "attention_pooling", "true"))),
        CatalogIdea(
            key="unified-sequence", priority=2,
            description="concatenate all slot sequences into one transformer input",
            rationale="one encoder shares parameters across slots and sees cross-slot context",
            applies=lambda ctx: ctx.config.sequence_mode != SequenceMode.UNIFIED,
            build_mutations=lambda ctx: (
                Mutation(MutationOp.SET_SEQUENCE_MODE, "sequence_mode", "Unified"),
                Mutation(MutationOp.SET_TOGGLE, "positional_encoding", "false"),
                Mutation(MutationOp.SET_TOGGLE, "attention_pooling", "false"))),
        CatalogIdea(
            key="reduce-lr-one-fifth", priority=0, repair=True,
            description="reduce the learning rate to one fifth after half the data",
            rationale="loss oscillation on the unified model points at an overly large LR",
            applies=lambda ctx: (ctx.fix_mode
                                 and ctx.config.sequence_mode == SequenceMode.UNIFIED
                                 and ctx.schedule.kind == ScheduleKind.CONSTANT),
            build_mutations=lambda ctx: (
                Mutation(MutationOp.SET_SCHEDULE_KIND, "schedule_kind", "HalfDataFifth"),)),
        CatalogIdea(
            key="slot-type-embeddings", priority=3,
            description="add learned slot-type embeddings to the unified sequence",
            rationale="restores slot identity lost by concatenation",
            applies=lambda ctx: (ctx.config.sequence_mode == SequenceMode.UNIFIED
                                 and not ctx.config.slot_type_embeddings),
            build_mutations=lambda ctx: (
                Mutation(MutationOp.SET_TOGGLE, "slot_type_embeddings", "true"),)),
        CatalogIdea(
            key="temporal-embeddings", priority=4,
            description="add learned embeddings over bucketized time deltas",
            rationale="recency of an interaction should modulate its contribution",
            applies=lambda ctx: (ctx.config.sequence_mode == SequenceMode.UNIFIED
                                 and not ctx.config.temporal_embeddings),
            build_mutations=lambda ctx: (
                Mutation(MutationOp.SET_TOGGLE, "temporal_embeddings", "true"),)),
        CatalogIdea(
            key="four-phase-lr", priority=5,
            description="four-phase LR: standard, reduced, plateau escape, fine-tune",
            rationale="a mid-run raise escapes plateaus before a low final fine-tune",
            applies=lambda ctx: (ctx.config.sequence_mode == SequenceMode.UNIFIED
                                 and ctx.schedule.kind != ScheduleKind.FOUR_PHASE),
            build_mutations=lambda ctx: (
                Mutation(MutationOp.SET_SCHEDULE_KIND, "schedule_kind", "FourPhase"),
                Mutation(MutationOp.SET_SCHEDULE_PARAM, "phase_table",
                         render_phase_table(reference_phase_table(ctx.schedule.base_lr))))),
    )


class ScriptedAdvisor:
    """Deterministic advisor over the exploration catalog."""

    def __init__(self, advisor_id: str = "scripted-1"):
        self.id = advisor_id
        self.catalog = _catalog()

    def propose(self, ctx: AdvisoryContext, k: int) -> list:
        tried = ctx.index.tried_idea_ids()
        out = []
        for entry in self.catalog:
            if entry.repair != ctx.fix_mode:
                continue
            if not entry.applies(ctx):
                continue
            idea_id = entry.idea_id(ctx)
            if idea_id in tried:
                continue
            mutations = entry.build_mutations(ctx)
            # pre-validate: a proposal must yield a buildable config
            apply_mutations(ctx.config, ctx.schedule, mutations)
            out.append(Idea(id=idea_id, description=entry.description,
                            mutations=mutations, rationale=entry.rationale,
                            proposed_by=(self.id,), priority=entry.priority))
            if len(out) >= k:
                break
        return out

    def repair_available(self, ctx: AdvisoryContext) -> bool:
        probe = replace(ctx, fix_target_tag=ctx.fix_target_tag or "probe")
        tried = ctx.index.tried_idea_ids()
        return any(e.repair and e.applies(probe) and e.idea_id(probe) not in tried
                   for e in self.catalog)

    def vote(self, ctx: AdvisoryContext, threshold: float) -> Vote:
        """Fix when the expected chance of repairing the branch clears 1-t."""
        if ctx.fault is not None:
            expectation = 0.05
            note = f"faulted run ({ctx.fault}); nothing obvious to repair"
        elif self.repair_available(ctx):
            expectation = min(0.95, 0.85 + 0.1 * ctx.instability)
            note = "a known repair applies to this failure mode"
        else:
            expectation = min(0.5, 0.15 + 0.1 * ctx.instability)
            note = "no catalogued repair; regression looks architectural"
        if expectation >= 1.0 - threshold:
            return Vote(self.id, VoteDecision.FIX, confidence=expectation, note=note)
        return Vote(self.id, VoteDecision.REVERT, confidence=1.0 - expectation, note=note)


def propose(advisors: Sequence, ctx: AdvisoryContext, k: int) -> list:
    """Merge per-advisor proposals by mutation-set equality and rank them."""
    if not advisors:
        raise AdvisoryFailure("no advisors configured")
    merged: dict = {}
    order: list = []
    failures = 0
    for advisor in advisors:
        try:
            ideas = advisor.propose(ctx, k)
        except AdvisoryFailure:
            failures += 1
            continue
        for idea in ideas:
            key = frozenset(idea.mutations)
            if key in merged:
                prev = merged[key]
                merged[key] = replace(
                    prev,
                    proposed_by=tuple(dict.fromkeys(prev.proposed_by + idea.proposed_by)),
                    priority=min(prev.priority, idea.priority),
                    id=min(prev.id, idea.id))
            else:
                merged[key] = idea
                order.append(key)
    if failures == len(advisors):
        raise AdvisoryFailure("every advisor failed or timed out")
    ranked = sorted(merged.values(),
                    key=lambda i: (-len(i.proposed_by), i.priority, i.id))
    return ranked[:k]


@dataclass(frozen=True)
class ConsensusResult:
    decision: Decision
    votes: tuple = ()
    bypassed: bool = False  # positive delta skips voting entirely


def vote_and_consense(advisors: Sequence, ctx: AdvisoryContext,
                      policy: ConsensusPolicy = ConsensusPolicy.MAJORITY,
                      threshold: float = 0.5) -> ConsensusResult:
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0, 1]")
    if ctx.metric_delta is not None and ctx.metric_delta > 0 and ctx.fault is None:
        return ConsensusResult(Decision.KEEP, bypassed=True)
    if ctx.metric_delta is None and ctx.fault is None:
        raise ValueError("need a metric delta or a fault to decide")
    votes = []
    for advisor in advisors:
        try:
            votes.append(advisor.vote(ctx, threshold))
        except AdvisoryFailure:
            continue
    if not votes:
        raise AdvisoryFailure("no advisor produced a vote (quorum failure)")
    fix = sum(1 for v in votes if v.decision == VoteDecision.FIX)
    revert = len(votes) - fix
    if policy == ConsensusPolicy.UNANIMOUS:
        decided = Decision.FIX if revert == 0 else Decision.REVERT
    else:
        decided = Decision.FIX if fix > revert else Decision.REVERT  # ties revert
    return ConsensusResult(decided, votes=tuple(votes))
