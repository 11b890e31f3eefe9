"""Learning-rate schedules: constant, half-data one-fifth reduction, and the
four-phase strategy (standard, reduced, plateau-escape raise, final
fine-tune).  Phases are expressed in day fractions so any total-day count
maps onto the same shape."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class ScheduleKind(Enum):
    CONSTANT = "Constant"
    HALF_DATA_FIFTH = "HalfDataFifth"
    FOUR_PHASE = "FourPhase"


# Day-fraction phase table scaled from the 28-day reference run:
# days 1-16 base, 17-19 base/5, 20-23 base*0.3, 24-28 base*0.16.
REFERENCE_PHASE_FRACTIONS = (16 / 28, 19 / 28, 23 / 28, 1.0)
REFERENCE_PHASE_SCALES = (1.0, 0.2, 0.3, 0.16)


def reference_phase_table(base_lr: float) -> tuple:
    return tuple((f, base_lr * s)
                 for f, s in zip(REFERENCE_PHASE_FRACTIONS, REFERENCE_PHASE_SCALES))


@dataclass(frozen=True)
class LrSchedule:
    kind: ScheduleKind
    base_lr: float
    # FourPhase only: ((fraction_end, lr), ...) partitioning (0, 1]
    phase_table: tuple = field(default=())

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.kind == ScheduleKind.FOUR_PHASE:
            if len(self.phase_table) != 4:
                raise ValueError("FourPhase needs exactly 4 phases")
            fracs = [f for f, _ in self.phase_table]
            if fracs != sorted(fracs) or len(set(fracs)) != 4:
                raise ValueError("phase fractions must be strictly increasing")
            if abs(fracs[-1] - 1.0) > 1e-12:
                raise ValueError("phases must partition (0, 1]: last fraction != 1")
            if any(lr <= 0 for _, lr in self.phase_table):
                raise ValueError("phase learning rates must be positive")
        elif self.phase_table:
            raise ValueError("phase_table only valid for FourPhase")

    def to_kv(self) -> dict:
        out = {"schedule_kind": self.kind.value, "base_lr": repr(self.base_lr)}
        if self.phase_table:
            out["phase_table"] = ";".join(f"{repr(f)}:{repr(lr)}"
                                          for f, lr in self.phase_table)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "LrSchedule":
        kind = ScheduleKind(kv["schedule_kind"])
        table = ()
        if kv.get("phase_table"):
            table = tuple((float(f), float(lr))
                          for f, lr in (p.split(":") for p in kv["phase_table"].split(";")))
        return cls(kind=kind, base_lr=float(kv["base_lr"]), phase_table=table)


def lr_at(schedule: LrSchedule, progress: float) -> float:
    """Piecewise-constant lookup at ``progress`` = day/total_days in (0, 1]."""
    if not (0.0 < progress <= 1.0):
        raise ValueError(f"progress must be in (0, 1], got {progress}")
    if schedule.kind == ScheduleKind.CONSTANT:
        return schedule.base_lr
    if schedule.kind == ScheduleKind.HALF_DATA_FIFTH:
        return schedule.base_lr if progress <= 0.5 else schedule.base_lr / 5.0
    for frac, lr in schedule.phase_table:
        if progress <= frac + 1e-12:
            return lr
    return schedule.phase_table[-1][1]


def preset_schedule(tag: str, base_lr: float) -> LrSchedule:
    """Schedule used by each version of the model lineage."""
    if tag in ("V3.2", "V3.3", "V3.4"):
        return LrSchedule(ScheduleKind.HALF_DATA_FIFTH, base_lr)
    if tag == "V3.5":
        return LrSchedule(ScheduleKind.FOUR_PHASE, base_lr,
                          phase_table=reference_phase_table(base_lr))
    return LrSchedule(ScheduleKind.CONSTANT, base_lr)
