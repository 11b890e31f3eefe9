"""Experiment-ledger reporting: the evolution summary table.

Rows follow lineage creation order with the column set
Version | Key Innovations | Seq Len | LR | Delta | Status, and the rendered
markdown re-parses into the same rows."""

from __future__ import annotations

from dataclasses import dataclass

from .memstore import MemoryIndex
from .schedule import ScheduleKind

COLUMNS = ("Version", "Key Innovations", "Seq Len", "LR", "Delta", "Status")


@dataclass(frozen=True)
class ReportRow:
    version: str
    innovations: str
    seq_len: str
    lr: str
    delta: str
    status: str


def _lr_label(kind: str, base_lr: float) -> str:
    if kind == ScheduleKind.CONSTANT.value:
        return f"{base_lr:g}"
    if kind == ScheduleKind.HALF_DATA_FIFTH.value:
        return f"{base_lr:g} then /5"
    return "Adaptive"


def report_rows(index: MemoryIndex) -> list:
    records = {r.run_id: r for r in index.experiments}
    rows = []
    keeps = [e.version_tag for e in index.journey if e.decision == "Keep"]
    final_best = keeps[-1] if keeps else None
    first_keep = keeps[0] if keeps else None
    for entry in index.journey:
        record = records.get(f"run-{entry.version_tag}")
        if record is None:
            continue  # guardrail rejections and stop markers have no run
        if entry.decision == "Keep":
            if entry.version_tag == final_best:
                status = "New Best" if entry.version_tag != first_keep else "Baseline"
            elif entry.version_tag == first_keep:
                status = "Baseline"
            else:
                status = "Success"
        else:
            status = "Failed"
        delta = "--" if entry.metric_delta is None else f"{entry.metric_delta:+.4f}"
        rows.append(ReportRow(
            version=entry.version_tag,
            innovations=entry.summary,
            seq_len="--" if record.seq_len is None else str(record.seq_len),
            lr=_lr_label(record.spec.schedule.kind.value, record.spec.schedule.base_lr),
            delta=delta,
            status=status))
    return rows


def render_report(rows) -> str:
    lines = ["| " + " | ".join(COLUMNS) + " |",
             "|" + "|".join("---" for _ in COLUMNS) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(
            (r.version, r.innovations, r.seq_len, r.lr, r.delta, r.status)) + " |")
    return "\n".join(lines)


def parse_report(text: str) -> list:
    rows = []
    for line in text.strip().split("\n")[2:]:
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if len(cells) != len(COLUMNS):
            raise ValueError(f"malformed report row: {line!r}")
        rows.append(ReportRow(*cells))
    return rows
