"""Variant lineage tree: the stand-in for per-experiment git branches.

Exactly one node is the current Baseline.  Failed and Reverted nodes are
leaves (repairs of a failed attempt attach to the branch base, with the
semantic ancestry kept in the config's parent_tag)."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .modelcfg import VariantConfig
from .schedule import LrSchedule


class NodeStatus(Enum):
    CANDIDATE = "Candidate"
    BASELINE = "Baseline"
    FAILED = "Failed"
    REVERTED = "Reverted"


class LineageError(RuntimeError):
    pass


@dataclass
class LineageNode:
    version_tag: str
    config: VariantConfig
    schedule: LrSchedule
    parent: str | None
    status: NodeStatus = NodeStatus.CANDIDATE
    run_id: str | None = None
    children: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"version_tag": self.version_tag, "parent": self.parent,
                "status": self.status.value, "run_id": self.run_id,
                "children": list(self.children),
                "config": self.config.to_kv(),
                "schedule": self.schedule.to_kv()}


class LineageTree:
    def __init__(self):
        self.nodes: dict[str, LineageNode] = {}
        self.order: list[str] = []  # creation order
        self.baseline_tag: str | None = None

    def add(self, tag: str, config: VariantConfig, schedule: LrSchedule,
            parent: str | None, run_id: str | None = None) -> LineageNode:
        if tag in self.nodes:
            raise LineageError(f"duplicate lineage tag {tag}")
        if parent is not None:
            if parent not in self.nodes:
                raise LineageError(f"unknown parent {parent} for {tag}")
            self.nodes[parent].children.append(tag)
        node = LineageNode(version_tag=tag, config=config, schedule=schedule,
                           parent=parent, run_id=run_id)
        self.nodes[tag] = node
        self.order.append(tag)
        return node

    def get(self, tag: str) -> LineageNode:
        if tag not in self.nodes:
            raise LineageError(f"unknown lineage tag {tag}")
        return self.nodes[tag]

    def baseline(self) -> LineageNode | None:
        return self.nodes[self.baseline_tag] if self.baseline_tag else None

    def set_baseline(self, tag: str):
        node = self.get(tag)
        if self.baseline_tag is not None and self.baseline_tag != tag:
            old = self.nodes[self.baseline_tag]
            old.status = NodeStatus.CANDIDATE
        node.status = NodeStatus.BASELINE
        self.baseline_tag = tag

    def mark(self, tag: str, status: NodeStatus):
        if status == NodeStatus.BASELINE:
            raise LineageError("use set_baseline to move the baseline")
        node = self.get(tag)
        if tag == self.baseline_tag:
            raise LineageError("cannot demote the baseline via mark")
        node.status = status

    def validate(self):
        baselines = [t for t, n in self.nodes.items() if n.status == NodeStatus.BASELINE]
        if self.nodes and len(baselines) != 1:
            raise LineageError(f"expected exactly one Baseline, found {baselines}")
        if baselines and baselines[0] != self.baseline_tag:
            raise LineageError("baseline_tag out of sync with node statuses")
        bad = (NodeStatus.FAILED, NodeStatus.REVERTED)
        for node in self.nodes.values():
            if node.status in bad:
                for child_tag in self._descendants(node.version_tag):
                    child = self.nodes[child_tag]
                    if child.status not in bad:
                        raise LineageError(
                            f"{node.version_tag} is {node.status.value} but descendant "
                            f"{child_tag} is {child.status.value}")

    def _descendants(self, tag: str):
        stack = list(self.nodes[tag].children)
        while stack:
            t = stack.pop()
            yield t
            stack.extend(self.nodes[t].children)

    def tags(self) -> list:
        return list(self.order)

    def to_dict(self) -> dict:
        return {"baseline": self.baseline_tag,
                "nodes": [self.nodes[t].to_dict() for t in self.order]}
