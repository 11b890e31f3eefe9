"""The research loop: propose -> gate -> plan -> train -> evaluate -> decide,
with memory updates before every next step so a killed loop resumes from the
store alone.

Decision rule: a positive metric delta promotes the candidate to Baseline
("creates a new branch"); otherwise advisors vote Fix (stay on the branch and
repair) or Revert (return to the previous best), with consecutive fixes
capped.  Timestamps come from a logical clock in replay mode so two runs
produce byte-identical memory files.
"""

from __future__ import annotations

import datetime
import os
import threading
from dataclasses import dataclass, field, replace

from .advisory import (AdvisoryContext, AdvisoryFailure, ConsensusPolicy,
                       ConsensusResult, Decision, Idea, ScriptedAdvisor,
                       apply_mutations, propose, vote_and_consense)
from .dataset import DataSource, split_by_day
from .lineage import LineageTree, NodeStatus
from .memstore import (FlowEntry, JourneyEntry, MemoryStore, VersionDoc)
from .modelcfg import VariantConfig, preset_variant
from .models import build_model, param_budget_check
from .scheduler import Budget, BudgetExceeded, WorkerPool
from .schedule import LrSchedule, ScheduleKind
from .training import (CostModel, TrainRunSpec, instability_score, train)

DESK_BASE_LR = 3e-3  # desk-scale analog of the reference 5e-5


class CrashInjected(RuntimeError):
    """Raised by test hooks to simulate a hard kill at a chosen point."""


# -- task planning -----------------------------------------------------------

PLAN_STEPS = ("validate_config", "build_model", "guardrail_check",
              "write_version_doc", "submit_job", "await_result", "analyze",
              "decide", "update_memory")


@dataclass
class Task:
    name: str
    status: str = "Pending"  # Pending | Done | Failed | Skipped


@dataclass
class TaskPlan:
    idea_id: str
    tasks: list = field(default_factory=lambda: [Task(n) for n in PLAN_STEPS])

    def names(self) -> list:
        return [t.name for t in self.tasks]

    def mark(self, name: str, status: str):
        for t in self.tasks:
            if t.name == name:
                t.status = status
                return
        raise KeyError(name)

    def truncate_after(self, name: str):
        """Mark ``name`` Failed and everything after it Skipped."""
        seen = False
        for t in self.tasks:
            if t.name == name:
                t.status = "Failed"
                seen = True
            elif seen:
                t.status = "Skipped"

    def replan(self) -> "TaskPlan":
        """Resume plan: completed steps retained, failed/skipped become pending."""
        fresh = TaskPlan(idea_id=self.idea_id)
        for old, new in zip(self.tasks, fresh.tasks):
            if old.status == "Done":
                new.status = "Done"
        return fresh


def plan_tasks(idea: Idea) -> TaskPlan:
    """Dependency-ordered routine tasks for one idea; guardrail precedes submit."""
    return TaskPlan(idea_id=idea.id)


# -- clocks ------------------------------------------------------------------

class LogicalClock:
    """Deterministic (round, label) stamps for byte-identical replay."""

    def __init__(self):
        self.round = 0

    def stamp(self, label: str) -> str:
        return f"r{self.round}.{label}"


class WallClock:
    def __init__(self):
        self.round = 0

    def stamp(self, label: str) -> str:
        return datetime.datetime.now(datetime.timezone.utc).isoformat()


# -- control and gating --------------------------------------------------------

@dataclass
class PendingItem:
    item_id: str
    kind: str       # "idea" | "decision"
    round: int
    payload: dict

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "kind": self.kind, "round": self.round,
                "payload": dict(self.payload)}


class LoopControl:
    """Thread-safe bridge between the loop and the API/dashboard.

    Mutations are queued and consumed at round boundaries; approvals are
    consumed at the gate wait."""

    def __init__(self):
        self._cond = threading.Condition()
        self._stop = False
        self._pause = False
        self._threshold_request: float | None = None
        self._resolutions: dict[str, tuple] = {}
        self.pending: dict[str, PendingItem] = {}
        self.current_round = 0
        self._snapshot: dict = {
            "round": -1, "threshold": None, "gate_mode": None, "budget": {},
            "baseline": None, "lineage": {"baseline": None, "nodes": []},
            "experiments": [], "pending": [], "curve": [], "stop_reason": None,
            "done": False}
        self.events_round = -1
        self.events_seq = 0
        self.paused = False

    # API side ---------------------------------------------------------------

    def snapshot(self) -> dict:
        with self._cond:
            return self._snapshot

    def pause(self) -> int:
        with self._cond:
            self._pause = True
            return self.current_round + 1

    def resume(self) -> int:
        with self._cond:
            self._pause = False
            self._cond.notify_all()
            return self.current_round + 1

    def set_threshold(self, value: float) -> int:
        if not (0.0 <= value <= 1.0):
            raise ValueError("threshold must lie in [0, 1]")
        with self._cond:
            self._threshold_request = value
            return self.current_round + 1

    def stop(self):
        with self._cond:
            self._stop = True
            self._cond.notify_all()

    def resolve(self, item_id: str, approve: bool, override: str | None = None) -> bool:
        """Returns False when the item is unknown (HTTP 404)."""
        with self._cond:
            if item_id not in self.pending:
                return False
            self._resolutions[item_id] = (approve, override)
            self._cond.notify_all()
            return True

    def wait_for_event(self, after_seq: int, timeout: float) -> tuple:
        with self._cond:
            self._cond.wait_for(lambda: self.events_seq > after_seq or self._stop,
                                timeout=timeout)
            return self.events_seq, self.events_round

    # loop side ----------------------------------------------------------------

    def publish(self, snapshot: dict):
        with self._cond:
            self._snapshot = snapshot
            self.events_round = snapshot.get("round", self.events_round)
            self.events_seq += 1
            self._cond.notify_all()

    def stopped(self) -> bool:
        with self._cond:
            return self._stop

    def boundary(self, state: "LoopState") -> None:
        """Apply queued control changes; block while paused."""
        with self._cond:
            self.current_round = state.round
            if self._threshold_request is not None:
                state.threshold = self._threshold_request
                self._threshold_request = None
            self.paused = self._pause
            while self._pause and not self._stop:
                self._cond.wait(timeout=0.2)
            self.paused = False

    def offer(self, items: list, publish, any_approve: bool = False) -> dict:
        """Publish pending items and wait for resolutions (or stop).

        With ``any_approve`` a single approval releases the wait, so approving
        one of several proposed ideas advances the loop; otherwise every item
        must be resolved."""

        def released():
            if self._stop:
                return True
            if any_approve and any(self._resolutions.get(i, (False, None))[0]
                                   for i in self.pending):
                return True
            return all(i in self._resolutions for i in self.pending)

        with self._cond:
            self.pending = {i.item_id: i for i in items}
        publish()
        with self._cond:
            self._cond.wait_for(released)
            out = {i: self._resolutions.pop(i) for i in list(self.pending)
                   if i in self._resolutions}
            self.pending = {}
        publish()
        return out


# -- loop configuration and state ---------------------------------------------

@dataclass
class LoopConfig:
    threshold: float = 0.5
    budget_gpu_hours: float = 2.0
    max_workers: int = 1
    gate_mode: str = "AutoApprove"  # AutoApprove | RequireApproval
    seed: int = 0
    train_days: int | None = None   # default: source days minus the 7 eval days
    batch_size: int = 64
    base_lr: float = DESK_BASE_LR
    initial_variant: VariantConfig | None = None
    policy: ConsensusPolicy = ConsensusPolicy.MAJORITY
    fix_cap: int = 2
    ideas_per_round: int = 3
    budget_factor: float = 1.5
    cost_model: CostModel = field(default_factory=CostModel)
    clock: str = "logical"  # logical | wall

    def resolved_initial(self) -> VariantConfig:
        return self.initial_variant or preset_variant("V2")


@dataclass
class LoopState:
    lineage: LineageTree = field(default_factory=LineageTree)
    records: dict = field(default_factory=dict)   # run_id -> ExperimentRecord
    baseline_tag: str | None = None
    fix_target: str | None = None
    fix_count: int = 0
    round: int = 0
    threshold: float = 0.5
    stop_reason: str | None = None
    rejected_ideas: set = field(default_factory=set)  # session-scoped gate rejections
    curve_rows: list = field(default_factory=list)  # (gpu_cum, best_agg, tag)

    def baseline_record(self):
        node = self.lineage.baseline()
        return self.records.get(node.run_id) if node else None

    def record_curve_point(self, gpu_hours_spent: float):
        record = self.baseline_record()
        if record is not None and record.aggregate is not None:
            self.curve_rows.append((gpu_hours_spent, record.aggregate,
                                    self.baseline_tag))


@dataclass
class LoopResult:
    state: LoopState
    store: MemoryStore
    stop_reason: str
    rounds: int


class RunDir:
    def __init__(self, root: str):
        self.root = root
        self.memory = os.path.join(root, "memory")
        self.snapshots = os.path.join(root, "snapshots")
        self.curves = os.path.join(root, "curves")
        self.logs = os.path.join(root, "logs")
        self.curve_csv = os.path.join(self.curves, "perf_vs_gpu_hours.csv")

    def create(self):
        for d in (self.root, self.snapshots, self.curves, self.logs,
                  os.path.join(self.logs, "advisors")):
            os.makedirs(d, exist_ok=True)

    def snapshot_path(self, run_id: str) -> str:
        return os.path.join(self.snapshots, f"{run_id}.rftn")

    def snapshot_ref(self, run_id: str) -> str:
        """Run-dir-relative reference, kept stable across machines for replay."""
        return os.path.join("snapshots", f"{run_id}.rftn")


# -- decision ----------------------------------------------------------------

@dataclass
class AppliedDecision:
    decision: Decision
    consensus: ConsensusResult | None
    forced_revert: bool = False
    override: str | None = None

    def describe(self) -> str:
        parts = [self.decision.value]
        if self.override:
            parts.append(f"expert override from {self.override}")
        if self.forced_revert:
            parts.append("forced by fix cap")
        if self.consensus and self.consensus.votes:
            votes = ",".join(f"{v.advisor_id}:{v.decision.value}@{v.confidence:.2f}"
                             for v in self.consensus.votes)
            parts.append(f"votes[{votes}]")
        return " ".join(parts)


def decide(ctx: AdvisoryContext, threshold: float, advisors,
           policy: ConsensusPolicy = ConsensusPolicy.MAJORITY,
           fix_count: int = 0, fix_cap: int = 2,
           approval_fn=None) -> AppliedDecision:
    """Metric-threshold decision with consensus voting and expert override.

    Positive delta keeps without voting; delta <= 0 or a fault goes to the
    vote.  ``approval_fn(proposed) -> Decision`` is the expert gate hook."""
    consensus = vote_and_consense(advisors, ctx, policy=policy, threshold=threshold)
    decision = consensus.decision
    forced = False
    if decision == Decision.FIX and fix_count >= fix_cap:
        decision = Decision.REVERT
        forced = True
    override = None
    if approval_fn is not None:
        chosen = approval_fn(decision)
        if chosen != decision:
            override = decision.value
            decision = chosen
    return AppliedDecision(decision=decision, consensus=consensus,
                           forced_revert=forced, override=override)


# -- the loop ------------------------------------------------------------------

def run_loop(run_dir: str, source: DataSource, cfg: LoopConfig,
             advisors=None, control: LoopControl | None = None,
             crash_hook=None) -> LoopResult:
    rd = RunDir(run_dir)
    rd.create()
    store = MemoryStore(rd.memory)
    if not store.exists():
        store.init_store()
    advisors = list(advisors) if advisors else [ScriptedAdvisor()]
    control = control or LoopControl()
    clock = LogicalClock() if cfg.clock == "logical" else WallClock()
    hook = crash_hook or (lambda stage, rnd: None)

    train_days = cfg.train_days or (source.days - 7)
    split = split_by_day(source, train_days)
    dims = source.spec.dims()
    budget = Budget(cfg.budget_gpu_hours, cfg.max_workers)

    job_baselines: dict = {}

    def runner(ticket):
        record = train(ticket.spec, source, split, cancel=ticket.cancel,
                       baseline=job_baselines.get(ticket.job_id),
                       run_id=ticket.job_id,
                       snapshot_path=rd.snapshot_path(ticket.job_id))
        if record.snapshot_path is not None:
            record.snapshot_path = rd.snapshot_ref(ticket.job_id)
        return record

    pool = WorkerPool(budget, runner)
    state = LoopState(threshold=cfg.threshold)
    io = _LoopIO(rd, store, pool, budget, source, split, dims, cfg, clock,
                 control, hook, advisors, job_baselines)

    try:
        pending = _recover(io, state)
        if pending is not None:
            _resume_round(io, state, pending)
        if state.baseline_tag is None and state.stop_reason is None:
            _baseline_round(io, state)
        while state.stop_reason is None and not control.stopped():
            clock.round = state.round
            control.boundary(state)
            io.publish(state)
            if control.stopped():
                state.stop_reason = "stopped by operator"
                break
            _one_round(io, state)
    finally:
        pool.shutdown()
        io.publish(state, done=True)
    return LoopResult(state=state, store=store,
                      stop_reason=state.stop_reason or "stopped by operator",
                      rounds=state.round)


class _LoopIO:
    """Wiring shared by the live loop and crash recovery."""

    def __init__(self, rd, store, pool, budget, source, split, dims, cfg, clock,
                 control, hook, advisors, job_baselines):
        self.rd = rd
        self.store = store
        self.pool = pool
        self.budget = budget
        self.source = source
        self.split = split
        self.dims = dims
        self.cfg = cfg
        self.clock = clock
        self.control = control
        self.hook = hook
        self.advisors = advisors
        self.job_baselines = job_baselines

    def publish(self, state: LoopState, done: bool = False):
        self.control.publish(build_snapshot(state, self.cfg, self.budget,
                                            self.control, self.dims, done=done))
        self.write_curve(state)

    def write_curve(self, state: LoopState):
        lines = ["gpu_hours_cumulative,best_aggregate,version_tag"]
        for gpu, agg, tag in state.curve_rows:
            lines.append(f"{repr(gpu)},{repr(agg)},{tag}")
        tmp = self.rd.curve_csv + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, self.rd.curve_csv)

    def spec_for(self, config: VariantConfig, schedule: LrSchedule) -> TrainRunSpec:
        return TrainRunSpec(variant=config, schedule=schedule,
                            batch_size=self.cfg.batch_size,
                            total_days=len(self.split.train_days),
                            seed=self.cfg.seed, cost_model=self.cfg.cost_model)

    def projected_cost(self, param_count: int) -> float:
        return self.cfg.cost_model.per_day(param_count) * len(self.split.train_days)


def build_snapshot(state: LoopState, cfg: LoopConfig, budget: Budget,
                   control: LoopControl, dims, done: bool = False) -> dict:
    experiments = []
    for run_id, record in state.records.items():
        variant = record.spec.variant
        experiments.append({
            "run_id": run_id,
            "version_tag": variant.version_tag,
            "status": record.status,
            "aggregate": record.aggregate,
            "metric_delta": record.metric_delta,
            "gpu_hours": record.gpu_hours,
            "seq_len": variant.effective_seq_len(dims.num_slots, dims.max_seq_len),
            "schedule_kind": record.spec.schedule.kind.value,
            "base_lr": record.spec.schedule.base_lr,
            "description": None,
        })
    return {
        "round": state.round,
        "threshold": state.threshold,
        "gate_mode": cfg.gate_mode,
        "budget": budget.to_dict(),
        "baseline": state.baseline_tag,
        "lineage": state.lineage.to_dict(),
        "experiments": experiments,
        "pending": [i.to_dict() for i in control.pending.values()],
        "curve": [list(row) for row in state.curve_rows],
        "stop_reason": state.stop_reason,
        "done": done,
    }


# -- rounds ---------------------------------------------------------------------

def _journey_pending(io, state, tag, idea, summary):
    entry = JourneyEntry(timestamp=io.clock.stamp("idea"), version_tag=tag,
                         idea_id=idea.id, summary=summary)
    if io.store.load_index().journey_by_tag(tag) is None:
        io.store.append_journey(entry)


def _finalize_journey(io, state, tag, outcome, decision, lesson, delta, new_baseline):
    io.store.update_journey(tag, outcome=outcome, lesson=lesson,
                            metric_delta=delta, new_baseline=new_baseline,
                            decision=decision)


def _apply_transition(state: LoopState, tag: str, decision: str):
    """Shared by the live loop and recovery replay."""
    lineage = state.lineage
    if decision == "Keep":
        lineage.set_baseline(tag)
        state.baseline_tag = tag
        state.fix_target = None
        state.fix_count = 0
    elif decision == "Fix":
        lineage.mark(tag, NodeStatus.FAILED)
        state.fix_target = tag
        state.fix_count += 1
    elif decision == "Revert":
        lineage.mark(tag, NodeStatus.FAILED)
        if state.fix_target is not None and state.fix_target != tag:
            lineage.mark(state.fix_target, NodeStatus.REVERTED)
        state.fix_target = None
        state.fix_count = 0
    else:
        raise ValueError(f"unknown decision {decision!r}")
    lineage.validate()


def _baseline_round(io, state: LoopState):
    cfg = io.cfg
    config = cfg.resolved_initial()
    tag = config.version_tag
    schedule = LrSchedule(ScheduleKind.CONSTANT, cfg.base_lr)
    idea = Idea(id="initial-baseline", description=f"train initial baseline {tag}",
                mutations=(_noop_mutation(cfg.base_lr),), rationale="starting point")
    _run_candidate(io, state, idea, config, schedule, tree_parent=None,
                   summary=f"initial baseline {tag}", is_baseline_round=True)


def _noop_mutation(base_lr: float):
    from .advisory import Mutation, MutationOp
    return Mutation(MutationOp.SET_SCHEDULE_PARAM, "base_lr", repr(base_lr))


def _next_tag(state: LoopState, index) -> str:
    existing = {e.version_tag for e in index.journey}
    existing.update(state.lineage.nodes)
    n = 0
    while f"V3.{n}" in existing:
        n += 1
    return f"V3.{n}"


def _one_round(io, state: LoopState):
    cfg = io.cfg
    index = io.store.load_index()
    base_node = (state.lineage.get(state.fix_target) if state.fix_target
                 else state.lineage.baseline())
    base_record = state.records.get(base_node.run_id)
    ctx = AdvisoryContext(
        index=index, config=base_node.config, schedule=base_node.schedule,
        last_report=base_record.report if base_record else None,
        metric_delta=base_record.metric_delta if base_record else None,
        instability=instability_score(base_record) if base_record else 0.0,
        fix_target_tag=state.fix_target)
    tried = index.tried_idea_ids()
    try:
        ideas = [i for i in propose(io.advisors, ctx, cfg.ideas_per_round)
                 if i.id not in state.rejected_ideas and i.id not in tried]
    except AdvisoryFailure as exc:
        state.stop_reason = f"advisor failure, loop paused for expert: {exc}"
        return
    if not ideas:
        state.stop_reason = "catalog exhausted: no applicable untried ideas"
        return

    idea = _gate_ideas(io, state, ideas)
    if idea is None:
        if io.control.stopped():
            state.stop_reason = "stopped by operator"
        # all offered ideas rejected: re-propose next round with them filtered
        return

    config, schedule = idea.apply(base_node.config, base_node.schedule)
    tag = _next_tag(state, index)
    config = config.with_tag(tag, parent=base_node.version_tag)
    tree_parent = (state.lineage.baseline().version_tag)
    _run_candidate(io, state, idea, config, schedule, tree_parent,
                   summary=idea.description)


def _gate_ideas(io, state, ideas):
    if io.cfg.gate_mode != "RequireApproval":
        return ideas[0]
    items = [PendingItem(item_id=f"idea-r{state.round}-{idea.id}", kind="idea",
                         round=state.round,
                         payload=dict(idea.to_kv(), priority=idea.priority))
             for idea in ideas]
    resolutions = io.control.offer(items, lambda: io.publish(state),
                                   any_approve=True)
    by_id = {f"idea-r{state.round}-{idea.id}": idea for idea in ideas}
    chosen = None
    for item in items:
        if item.item_id not in resolutions:
            continue  # unresolved ideas may come back next round
        approved, _ = resolutions[item.item_id]
        if approved and chosen is None:
            chosen = by_id[item.item_id]
        elif not approved:
            state.rejected_ideas.add(by_id[item.item_id].id)
    return chosen


def _gate_decision(io, state, tag, proposed: Decision):
    if io.cfg.gate_mode != "RequireApproval":
        return proposed
    item = PendingItem(item_id=f"decision-r{state.round}-{tag}", kind="decision",
                       round=state.round,
                       payload={"version_tag": tag, "proposed": proposed.value,
                                "options": [d.value for d in Decision]})
    resolutions = io.control.offer([item], lambda: io.publish(state))
    approved, override = resolutions.get(item.item_id, (True, None))
    if override:
        return Decision(override)
    return proposed


def _run_candidate(io, state: LoopState, idea, config, schedule, tree_parent,
                   summary, is_baseline_round=False):
    cfg = io.cfg
    tag = config.version_tag
    plan = plan_tasks(idea)
    plan.mark("validate_config", "Done")  # idea.apply validated on construction

    candidate = build_model(config, io.dims, cfg.seed)
    plan.mark("build_model", "Done")

    baseline_node = state.lineage.baseline()
    if baseline_node is not None:
        baseline_model = build_model(baseline_node.config, io.dims, cfg.seed)
        check = param_budget_check(candidate, baseline_model, cfg.budget_factor)
    else:
        check = param_budget_check(candidate, candidate, cfg.budget_factor)
    if not check.passed:
        plan.truncate_after("guardrail_check")
        entry = JourneyEntry(
            timestamp=io.clock.stamp("guardrail"),
            version_tag=f"rejected-{idea.id}", idea_id=idea.id,
            summary=summary, outcome="Failed", decision="GuardrailReject",
            lesson=f"guardrail: {check.describe()}; no job submitted")
        io.store.append_journey(entry)
        state.round += 1
        state.record_curve_point(io.budget.gpu_hours_spent)
        io.publish(state)
        io.hook("guardrail_reject", state.round)
        return
    plan.mark("guardrail_check", "Done")

    doc = VersionDoc(version_tag=tag, kind="IMPLEMENTATION", config=config,
                     mutations=tuple(m.render() for m in idea.mutations),
                     param_report=check.describe(), notes=idea.rationale)
    io.store.write_version_doc(doc, current_version=tag)
    plan.mark("write_version_doc", "Done")
    io.hook("after_doc", state.round)

    _journey_pending(io, state, tag, idea, summary)
    io.hook("after_journey_pending", state.round)

    _train_and_decide(io, state, idea, config, schedule, tree_parent, plan,
                      is_baseline_round)


def _train_and_decide(io, state, idea, config, schedule, tree_parent, plan,
                      is_baseline_round, existing_record=None):
    cfg = io.cfg
    tag = config.version_tag
    run_id = f"run-{tag}"
    spec = io.spec_for(config, schedule)
    baseline_node = state.lineage.baseline()
    base_record = state.records.get(baseline_node.run_id) if baseline_node else None

    record = existing_record
    if record is not None:
        io.budget.charge(record.gpu_hours)  # pool charging was lost in the crash
    if record is None:
        index = io.store.load_index()
        if index.experiment_by_id(run_id) is not None:
            record = index.experiment_by_id(run_id)
            io.budget.charge(record.gpu_hours)
        else:
            if not any(f.flow_id == run_id for f in index.flows):
                io.store.append_flow(FlowEntry(
                    timestamp=io.clock.stamp("flow"), flow_id=run_id,
                    version_tag=tag, schedule_kind=schedule.kind.value,
                    base_lr=schedule.base_lr, status="Submitted"))
            io.hook("after_flow", state.round)
            io.job_baselines[run_id] = base_record.report if base_record else None
            try:
                ticket = io.pool.submit(run_id, spec,
                                        io.projected_cost(_count_params(io, config, cfg)))
            except BudgetExceeded as exc:
                _finalize_journey(io, state, tag, outcome="Failed", decision="Stop",
                                  lesson=f"budget exhausted before submission: {exc}",
                                  delta=None, new_baseline=state.baseline_tag)
                io.store.update_flow(run_id, status="RejectedBudget")
                state.stop_reason = f"budget exhausted: {exc}"
                state.round += 1
                io.publish(state)
                return
            plan.mark("submit_job", "Done")
            ticket = io.pool.await_ticket(run_id)
            record = ticket.record
            io.store.append_experiment(record, timestamp=io.clock.stamp("experiment"))
            io.store.update_flow(run_id, status=record.status)
            io.hook("after_experiment", state.round)
    plan.mark("await_result", "Done")

    state.records[run_id] = record
    node = state.lineage.add(tag, config, schedule, parent=tree_parent, run_id=run_id)

    instability = instability_score(record)
    plan.mark("analyze", "Done")

    if is_baseline_round:
        if record.status != "Succeeded":
            state.stop_reason = (f"initial baseline run {record.status}: "
                                 f"{record.fault_reason}")
            _finalize_journey(io, state, tag, outcome="Failed", decision="Stop",
                              lesson=state.stop_reason, delta=None, new_baseline=None)
            state.round += 1
            io.publish(state)
            return
        state.lineage.set_baseline(tag)
        state.baseline_tag = tag
        _finalize_journey(io, state, tag, outcome="Success", decision="Keep",
                          lesson="initial baseline trained",
                          delta=None, new_baseline=tag)
        state.round += 1
        state.record_curve_point(io.budget.gpu_hours_spent)
        io.publish(state)
        io.hook("round_end", state.round)
        return

    fault = None
    if record.status != "Succeeded":
        fault = record.fault_reason or f"run {record.status.lower()}"
    ctx = AdvisoryContext(index=io.store.load_index(), config=config,
                          schedule=schedule, last_report=record.report,
                          metric_delta=record.metric_delta, fault=fault,
                          instability=instability,
                          fix_target_tag=state.fix_target)
    applied = decide(ctx, state.threshold, io.advisors, policy=cfg.policy,
                     fix_count=state.fix_count, fix_cap=cfg.fix_cap,
                     approval_fn=lambda proposed: _gate_decision(io, state, tag, proposed))
    plan.mark("decide", "Done")

    decision = applied.decision
    outcome = {"Keep": "Success", "Fix": "Failed", "Revert": "Reverted"}[decision.value]
    lesson = _lesson_for(record, applied, instability)
    _apply_transition(state, tag, decision.value)
    _finalize_journey(io, state, tag, outcome=outcome, decision=decision.value,
                      lesson=lesson, delta=record.metric_delta,
                      new_baseline=state.baseline_tag)
    plan.mark("update_memory", "Done")
    state.round += 1
    state.record_curve_point(io.budget.gpu_hours_spent)
    io.publish(state)
    io.hook("round_end", state.round)


def _lesson_for(record, applied: AppliedDecision, instability: float) -> str:
    if record.status != "Succeeded":
        head = f"run {record.status.lower()}: {record.fault_reason}"
    elif record.metric_delta is not None and record.metric_delta > 0:
        head = f"improved the aggregate by {record.metric_delta:+.4f}pp"
    else:
        head = (f"no improvement ({record.metric_delta:+.4f}pp), "
                f"loss instability {instability:.3f}")
    return f"{head}; decision {applied.describe()}"


def _count_params(io, config, cfg) -> int:
    return build_model(config, io.dims, cfg.seed).param_count


# -- recovery -------------------------------------------------------------------

def _recover(io, state: LoopState):
    """Rebuild LoopState from the first-layer memory; returns a pending entry
    when the last round was interrupted mid-flight.

    Transitions are replayed through the same _apply_transition used live, so
    the reconstructed state matches the in-memory state field for field."""
    index = io.store.load_index()
    pending = None
    for entry in index.journey:
        if entry.outcome == "Pending":
            pending = entry
            continue
        if entry.decision == "GuardrailReject":
            state.round += 1
            continue
        if entry.decision == "Stop":
            state.stop_reason = entry.lesson or "stopped"
            state.round += 1
            continue
        run_id = f"run-{entry.version_tag}"
        record = index.experiment_by_id(run_id)
        if record is None:
            continue
        state.records[run_id] = record
        io.budget.charge(record.gpu_hours)
        base = state.lineage.baseline()
        state.lineage.add(entry.version_tag, record.spec.variant,
                          record.spec.schedule,
                          parent=base.version_tag if base else None,
                          run_id=run_id)
        decision = entry.decision or {"Success": "Keep", "Failed": "Fix",
                                      "Reverted": "Revert"}[entry.outcome]
        _apply_transition(state, entry.version_tag, decision)
        state.round += 1
        state.record_curve_point(io.budget.gpu_hours_spent)
    io.clock.round = state.round
    io.write_curve(state)
    return pending


def _resume_round(io, state: LoopState, entry: JourneyEntry):
    """Finish an interrupted round.

    By write order, a Pending journey entry implies the version doc exists,
    so the candidate config and mutations are always recoverable."""
    from .advisory import Mutation
    doc = io.store.read_version_doc(entry.version_tag, "IMPLEMENTATION")
    config = doc.config
    mutations = tuple(Mutation.parse(m) for m in doc.mutations)
    is_baseline_round = state.baseline_tag is None
    if is_baseline_round:
        schedule = LrSchedule(ScheduleKind.CONSTANT, io.cfg.base_lr)
        tree_parent = None
    else:
        base_node = (state.lineage.get(state.fix_target) if state.fix_target
                     else state.lineage.baseline())
        _, schedule = apply_mutations(base_node.config, base_node.schedule, mutations)
        tree_parent = state.lineage.baseline().version_tag
    idea = Idea(id=entry.idea_id, description=entry.summary,
                mutations=mutations or (_noop_mutation(io.cfg.base_lr),))
    existing = io.store.load_index().experiment_by_id(f"run-{entry.version_tag}")
    plan = plan_tasks(idea).replan()
    _train_and_decide(io, state, idea, config, schedule, tree_parent, plan,
                      is_baseline_round=is_baseline_round,
                      existing_record=existing)
