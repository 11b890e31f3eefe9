"""Two-layer experiment memory on plain markdown.

First layer: JOURNEY.md, EXPERIMENTS.md, FLOWS.md in the store root — an
index both humans and the loop read.  Second layer: versions/V{x}.{y}_{KIND}.md
with per-version detail, touched only for the current version and read only
when needed.

Machine-readable state lives in HTML-comment fences so rendered markdown
stays clean:

    <!--rf:journey
    version_tag=V3.0
    outcome=Failed
    -->

Everything outside a fence is presentation and is never parsed.  All writes
are atomic (temp file + rename) behind a per-store lock file.
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass, field, replace

from .evaluation import MetricReport
from .modelcfg import VariantConfig
from .training import ExperimentRecord, TrainRunSpec

JOURNEY_FILE = "JOURNEY.md"
EXPERIMENTS_FILE = "EXPERIMENTS.md"
FLOWS_FILE = "FLOWS.md"
VERSIONS_DIR = "versions"
LOCK_FILE = ".lock"

_KEY_RE = re.compile(r"^[a-z0-9_.]+$")
_FENCE_OPEN = re.compile(r"^<!--rf:([a-z_]+)$")
_FENCE_CLOSE = "-->"

JOURNEY_OUTCOMES = ("Pending", "Success", "Failed", "Reverted")


class MemoryError_(RuntimeError):
    pass


class StoreLocked(MemoryError_):
    """Another writer holds the store lock; retry later."""


class DuplicateEntry(MemoryError_):
    pass


class MemoryParseError(MemoryError_):
    pass


# -- value codec -------------------------------------------------------------

def encode_value(value: str) -> str:
    return (value.replace("\\", "\\\\").replace("\r", "\\r").replace("\n", "\\n"))


def decode_value(raw: str) -> str:
    out = []
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch == "\\" and i + 1 < len(raw):
            nxt = raw[i + 1]
            if nxt == "n":
                out.append("\n")
            elif nxt == "r":
                out.append("\r")
            elif nxt == "\\":
                out.append("\\")
            else:
                out.append(nxt)
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def render_block(kind: str, kv: dict) -> str:
    lines = [f"<!--rf:{kind}"]
    for key, value in kv.items():
        if value is None:
            continue
        if not _KEY_RE.match(key):
            raise ValueError(f"invalid machine-block key: {key!r}")
        lines.append(f"{key}={encode_value(str(value))}")
    lines.append(_FENCE_CLOSE)
    return "\n".join(lines)


def parse_blocks(text: str, path: str = "<memory>") -> list:
    """All machine blocks as (kind, kv, first_line_number) tuples."""
    blocks = []
    kind = None
    kv: dict = {}
    start = 0
    for lineno, line in enumerate(text.split("\n"), start=1):
        if kind is None:
            m = _FENCE_OPEN.match(line)
            if m:
                kind, kv, start = m.group(1), {}, lineno
            continue
        if line == _FENCE_CLOSE:
            blocks.append((kind, kv, start))
            kind = None
            continue
        if "=" not in line:
            raise MemoryParseError(f"{path}:{lineno}: malformed machine line {line!r}")
        key, raw = line.split("=", 1)
        kv[key] = decode_value(raw)
    if kind is not None:
        raise MemoryParseError(f"{path}:{start}: unterminated machine block")
    return blocks


# -- entry types -------------------------------------------------------------

@dataclass
class JourneyEntry:
    timestamp: str
    version_tag: str
    idea_id: str
    summary: str
    outcome: str = "Pending"
    lesson: str = ""
    metric_delta: float | None = None
    new_baseline: str | None = None
    decision: str | None = None  # Keep | Fix | Revert | GuardrailReject | Stop

    def __post_init__(self):
        if self.outcome not in JOURNEY_OUTCOMES:
            raise ValueError(f"outcome must be one of {JOURNEY_OUTCOMES}")

    def to_kv(self) -> dict:
        kv = {"timestamp": self.timestamp, "version_tag": self.version_tag,
              "idea_id": self.idea_id, "summary": self.summary,
              "outcome": self.outcome, "lesson": self.lesson}
        if self.metric_delta is not None:
            kv["metric_delta"] = repr(self.metric_delta)
        if self.new_baseline is not None:
            kv["new_baseline"] = self.new_baseline
        if self.decision is not None:
            kv["decision"] = self.decision
        return kv

    @classmethod
    def from_kv(cls, kv: dict) -> "JourneyEntry":
        return cls(timestamp=kv["timestamp"], version_tag=kv["version_tag"],
                   idea_id=kv["idea_id"], summary=kv["summary"],
                   outcome=kv["outcome"], lesson=kv.get("lesson", ""),
                   metric_delta=float(kv["metric_delta"]) if "metric_delta" in kv else None,
                   new_baseline=kv.get("new_baseline"),
                   decision=kv.get("decision"))

    def human_line(self) -> str:
        delta = "" if self.metric_delta is None else f" (delta {self.metric_delta:+.4f}pp)"
        lesson = f" — {self.lesson.splitlines()[0]}" if self.lesson else ""
        return f"**{self.version_tag}** `{self.idea_id}` → {self.outcome}{delta}{lesson}"


@dataclass
class FlowEntry:
    timestamp: str
    flow_id: str
    version_tag: str
    schedule_kind: str
    base_lr: float
    status: str = "Submitted"

    def to_kv(self) -> dict:
        return {"timestamp": self.timestamp, "flow_id": self.flow_id,
                "version_tag": self.version_tag, "schedule_kind": self.schedule_kind,
                "base_lr": repr(self.base_lr), "status": self.status}

    @classmethod
    def from_kv(cls, kv: dict) -> "FlowEntry":
        return cls(timestamp=kv["timestamp"], flow_id=kv["flow_id"],
                   version_tag=kv["version_tag"], schedule_kind=kv["schedule_kind"],
                   base_lr=float(kv["base_lr"]), status=kv["status"])

    def human_line(self) -> str:
        return (f"**{self.flow_id}** {self.version_tag} {self.schedule_kind}"
                f"@{self.base_lr:g} [{self.status}]")


def experiment_to_kv(record: ExperimentRecord, timestamp: str) -> dict:
    kv = {"timestamp": timestamp, "run_id": record.run_id, "status": record.status}
    kv.update(record.spec.to_kv())
    if record.report is not None:
        kv.update(record.report.to_kv())
    if record.metric_delta is not None:
        kv["metric_delta"] = repr(record.metric_delta)
    kv["gpu_hours"] = repr(record.gpu_hours)
    kv["loss_curve"] = ",".join(repr(x) for x in record.loss_curve)
    kv["lr_curve"] = ",".join(repr(x) for x in record.lr_curve)
    if record.fault_reason is not None:
        kv["fault_reason"] = record.fault_reason
    if record.snapshot_path is not None:
        kv["snapshot"] = record.snapshot_path
    if record.seq_len is not None:
        kv["seq_len"] = str(record.seq_len)
    return kv


def experiment_from_kv(kv: dict) -> ExperimentRecord:
    spec = TrainRunSpec.from_kv(kv)
    report = None
    if any(k.startswith("auc.") for k in kv) or "absent" in kv:
        report = MetricReport.from_kv(kv)
    curve = tuple(float(x) for x in kv["loss_curve"].split(",") if x)
    lrs = tuple(float(x) for x in kv["lr_curve"].split(",") if x)
    return ExperimentRecord(
        run_id=kv["run_id"], spec=spec, status=kv["status"], loss_curve=curve,
        lr_curve=lrs, report=report,
        metric_delta=float(kv["metric_delta"]) if "metric_delta" in kv else None,
        gpu_hours=float(kv["gpu_hours"]), fault_reason=kv.get("fault_reason"),
        snapshot_path=kv.get("snapshot"),
        seq_len=int(kv["seq_len"]) if "seq_len" in kv else None)


def experiment_human_line(record: ExperimentRecord) -> str:
    agg = f"{record.aggregate:.5f}" if record.aggregate is not None else "n/a"
    delta = (f"{record.metric_delta:+.4f}pp" if record.metric_delta is not None else "n/a")
    return (f"**{record.run_id}** [{record.status}] agg={agg} delta={delta} "
            f"gpu_hours={record.gpu_hours:.4f}")


@dataclass
class VersionDoc:
    version_tag: str
    kind: str  # uppercase, e.g. IMPLEMENTATION
    config: VariantConfig
    mutations: tuple = ()
    param_report: str = ""
    notes: str = ""

    def __post_init__(self):
        if not re.match(r"^[A-Z][A-Z_]*$", self.kind):
            raise ValueError(f"doc kind must be uppercase, got {self.kind!r}")

    def filename(self) -> str:
        return f"{self.version_tag}_{self.kind}.md"

    def to_kv(self) -> dict:
        kv = {"version_tag": self.version_tag, "kind": self.kind,
              "mutations": ";".join(self.mutations),
              "param_report": self.param_report, "notes": self.notes}
        kv.update({f"config.{k}": v for k, v in self.config.to_kv().items()})
        return kv

    @classmethod
    def from_kv(cls, kv: dict) -> "VersionDoc":
        config = VariantConfig.from_kv(
            {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")})
        mutations = tuple(m for m in kv.get("mutations", "").split(";") if m)
        return cls(version_tag=kv["version_tag"], kind=kv["kind"], config=config,
                   mutations=mutations, param_report=kv.get("param_report", ""),
                   notes=kv.get("notes", ""))


@dataclass
class MemoryIndex:
    journey: list = field(default_factory=list)
    experiments: list = field(default_factory=list)
    flows: list = field(default_factory=list)
    doc_links: list = field(default_factory=list)  # (version_tag, kind) pairs

    def journey_by_tag(self, tag: str) -> JourneyEntry | None:
        for e in self.journey:
            if e.version_tag == tag:
                return e
        return None

    def experiment_by_id(self, run_id: str) -> ExperimentRecord | None:
        for e in self.experiments:
            if e.run_id == run_id:
                return e
        return None

    def tried_idea_ids(self) -> set:
        return {e.idea_id for e in self.journey}


_HEADERS = {
    JOURNEY_FILE: ("# JOURNEY\n\nResearch ideas, outcomes, and lessons from "
                   "every model iteration, newest last.\n"),
    EXPERIMENTS_FILE: ("# EXPERIMENTS\n\nPast and active experiments with "
                       "metrics and cost.\n"),
    FLOWS_FILE: ("# FLOWS\n\nScheduled training flows and their parameters.\n"),
}

_LINK_RE = re.compile(r"^- \[(?P<tag>\S+) (?P<kind>[A-Z_]+)\]\(versions/\S+\)$")


class MemoryStore:
    """Single-writer store over one directory; readers are lock-free."""

    def __init__(self, root: str, file_reader=None, lock_retries: int = 20,
                 lock_wait_s: float = 0.05):
        self.root = root
        self._read_hook = file_reader
        self._replace = os.replace  # injectable for crash simulation
        self._lock_retries = lock_retries
        self._lock_wait_s = lock_wait_s

    # -- plumbing ---------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def exists(self) -> bool:
        return all(os.path.isfile(self.path(n)) for n in _HEADERS)

    def init_store(self):
        if self.exists():
            raise MemoryError_(f"memory store already initialized at {self.root}")
        os.makedirs(self.root, exist_ok=True)
        os.makedirs(self.path(VERSIONS_DIR), exist_ok=True)
        for name, header in _HEADERS.items():
            self._write_atomic(self.path(name), header)

    def _read(self, path: str) -> str:
        if self._read_hook is not None:
            self._read_hook(path)
        with open(path, encoding="utf-8") as fh:
            return fh.read()

    def _write_atomic(self, path: str, content: str):
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(content)
            fh.flush()
            os.fsync(fh.fileno())
        self._replace(tmp, path)

    def _locked(self):
        return _Lock(self.path(LOCK_FILE), self._lock_retries, self._lock_wait_s)

    # -- appends ------------------------------------------------------------

    def append_journey(self, entry: JourneyEntry):
        self._append(JOURNEY_FILE, "journey", entry.to_kv(), entry.human_line(),
                     id_key="version_tag", id_value=entry.version_tag)

    def append_flow(self, entry: FlowEntry):
        self._append(FLOWS_FILE, "flow", entry.to_kv(), entry.human_line(),
                     id_key="flow_id", id_value=entry.flow_id)

    def append_experiment(self, record: ExperimentRecord, timestamp: str):
        self._append(EXPERIMENTS_FILE, "experiment",
                     experiment_to_kv(record, timestamp),
                     experiment_human_line(record),
                     id_key="run_id", id_value=record.run_id)

    def _append(self, filename: str, kind: str, kv: dict, human: str,
                id_key: str, id_value: str):
        with self._locked():
            path = self.path(filename)
            text = self._read(path)
            for _, existing, _ in parse_blocks(text, path):
                if existing.get(id_key) == id_value:
                    raise DuplicateEntry(f"{filename}: {id_key}={id_value} already present")
            unit = f"\n{human}\n{render_block(kind, kv)}\n"
            self._write_atomic(path, text + unit)

    # -- updates ------------------------------------------------------------

    def update_journey(self, version_tag: str, outcome: str | None = None,
                       lesson: str | None = None, metric_delta: float | None = None,
                       new_baseline: str | None = None, decision: str | None = None):
        def mutate(entry: JourneyEntry) -> JourneyEntry:
            if outcome is not None and outcome != entry.outcome:
                if entry.outcome != "Pending":
                    raise MemoryError_(
                        f"journey outcome may only move Pending->final, "
                        f"got {entry.outcome}->{outcome}")
                entry = replace(entry, outcome=outcome)
            if lesson is not None:
                entry = replace(entry, lesson=lesson)
            if metric_delta is not None:
                entry = replace(entry, metric_delta=metric_delta)
            if new_baseline is not None:
                entry = replace(entry, new_baseline=new_baseline)
            if decision is not None:
                entry = replace(entry, decision=decision)
            return entry

        self._update(JOURNEY_FILE, "journey", "version_tag", version_tag,
                     JourneyEntry.from_kv, lambda e: (e.to_kv(), e.human_line()), mutate)

    def update_flow(self, flow_id: str, status: str):
        def mutate(entry: FlowEntry) -> FlowEntry:
            return replace(entry, status=status)

        self._update(FLOWS_FILE, "flow", "flow_id", flow_id,
                     FlowEntry.from_kv, lambda e: (e.to_kv(), e.human_line()), mutate)

    def _update(self, filename: str, kind: str, id_key: str, id_value: str,
                from_kv, render, mutate):
        with self._locked():
            path = self.path(filename)
            text = self._read(path)
            lines = text.split("\n")
            span = self._find_block_span(lines, kind, id_key, id_value, path)
            if span is None:
                raise MemoryError_(f"{filename}: no {kind} entry with {id_key}={id_value}")
            start, end = span
            entry = mutate(from_kv(parse_blocks("\n".join(lines[start:end + 1]), path)[0][1]))
            kv, human = render(entry)
            new_unit = [human] + render_block(kind, kv).split("\n")
            # replace our own human marker line directly above, when present
            if start > 0 and lines[start - 1].startswith("**"):
                start -= 1
            lines[start:end + 1] = new_unit
            self._write_atomic(path, "\n".join(lines))

    @staticmethod
    def _find_block_span(lines, kind, id_key, id_value, path):
        open_tag = f"<!--rf:{kind}"
        i = 0
        while i < len(lines):
            if lines[i] == open_tag:
                j = i
                while j < len(lines) and lines[j] != _FENCE_CLOSE:
                    j += 1
                if j == len(lines):
                    raise MemoryParseError(f"{path}:{i + 1}: unterminated machine block")
                body = parse_blocks("\n".join(lines[i:j + 1]), path)[0][1]
                if body.get(id_key) == id_value:
                    return i, j
                i = j
            i += 1
        return None

    # -- second layer -------------------------------------------------------

    def write_version_doc(self, doc: VersionDoc, current_version: str) -> str:
        if doc.version_tag != current_version:
            raise MemoryError_(
                f"only the current version's docs may change "
                f"(current {current_version}, doc {doc.version_tag})")
        with self._locked():
            rel = os.path.join(VERSIONS_DIR, doc.filename())
            body = [f"# {doc.version_tag} {doc.kind}", ""]
            if doc.notes:
                body += [doc.notes, ""]
            if doc.mutations:
                body += ["## Mutations", ""] + [f"- `{m}`" for m in doc.mutations] + [""]
            if doc.param_report:
                body += ["## Parameters", "", doc.param_report, ""]
            body += [render_block("version_doc", doc.to_kv()), ""]
            self._write_atomic(self.path(rel), "\n".join(body))
            self._add_doc_link(doc.version_tag, doc.kind, rel)
        return self.path(rel)

    def _add_doc_link(self, tag: str, kind: str, rel: str):
        path = self.path(JOURNEY_FILE)
        text = self._read(path)
        link = f"- [{tag} {kind}]({rel})"
        if link in text.split("\n"):
            return
        self._write_atomic(path, text + f"\n{link}\n")

    def read_version_doc(self, version_tag: str, kind: str) -> VersionDoc:
        rel = os.path.join(VERSIONS_DIR, f"{version_tag}_{kind}.md")
        path = self.path(rel)
        if not os.path.isfile(path):
            raise MemoryError_(f"no version doc {rel}")
        blocks = [b for b in parse_blocks(self._read(path), path) if b[0] == "version_doc"]
        if not blocks:
            raise MemoryParseError(f"{path}: no version_doc machine block")
        return VersionDoc.from_kv(blocks[0][1])

    # -- index --------------------------------------------------------------

    def load_index(self) -> MemoryIndex:
        """Parse the three first-layer files; second-layer files stay unread."""
        index = MemoryIndex()
        j_path = self.path(JOURNEY_FILE)
        j_text = self._read(j_path)
        for kind, kv, _ in parse_blocks(j_text, j_path):
            if kind == "journey":
                index.journey.append(JourneyEntry.from_kv(kv))
        for line in j_text.split("\n"):
            m = _LINK_RE.match(line)
            if m:
                index.doc_links.append((m.group("tag"), m.group("kind")))
        e_path = self.path(EXPERIMENTS_FILE)
        for kind, kv, _ in parse_blocks(self._read(e_path), e_path):
            if kind == "experiment":
                index.experiments.append(experiment_from_kv(kv))
        f_path = self.path(FLOWS_FILE)
        for kind, kv, _ in parse_blocks(self._read(f_path), f_path):
            if kind == "flow":
                index.flows.append(FlowEntry.from_kv(kv))
        return index


class _Lock:
    def __init__(self, path: str, retries: int, wait_s: float):
        self.path = path
        self.retries = retries
        self.wait_s = wait_s

    def __enter__(self):
        for attempt in range(self.retries):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(fd, str(os.getpid()).encode())
                os.close(fd)
                return self
            except FileExistsError:
                time.sleep(self.wait_s)
        raise StoreLocked(f"store lock {self.path} held by another writer; retry")

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False
