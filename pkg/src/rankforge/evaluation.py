"""AUC evaluation over the 7-day unseen window and the north-star aggregate.

The aggregate is the mean of six AUCs: three behavior types (click,
conversion, grouped conversion) crossed with two search scenes.  In delta
form (signed percentage points vs a baseline aggregate) it is the reward
signal the decision loop consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .features import BEHAVIORS, DatasetSplit, SceneId, signal_index

SCENE_NAMES = {SceneId.POINT_OF_INTEREST: "poi", SceneId.POPULARITY_BASED: "pop"}
CELL_KEYS = tuple(f"{b}_{SCENE_NAMES[s]}" for s in SceneId for b in BEHAVIORS)


class UndefinedAUC(ValueError):
    """Scores cannot be ranked: one of the classes is empty."""


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    pos = labels == 1
    p = int(pos.sum())
    n = labels.size - p
    if p == 0 or n == 0:
        raise UndefinedAUC(f"need both classes, got {p} positives / {n} negatives")
    ranks = rankdata(scores)  # midranks
    return float((ranks[pos].sum() - p * (p + 1) / 2.0) / (p * n))


@dataclass
class MetricReport:
    aucs: dict = field(default_factory=dict)      # cell key -> auc
    absent: tuple = ()                            # cells with a single class
    aggregate: float | None = None
    delta_vs_baseline: float | None = None

    @property
    def valid(self) -> bool:
        return self.aggregate is not None

    def to_kv(self) -> dict:
        out = {}
        for key in CELL_KEYS:
            if key in self.aucs:
                out[f"auc.{key}"] = repr(self.aucs[key])
        if self.absent:
            out["absent"] = ",".join(self.absent)
        if self.aggregate is not None:
            out["aggregate"] = repr(self.aggregate)
        if self.delta_vs_baseline is not None:
            out["metric_delta"] = repr(self.delta_vs_baseline)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "MetricReport":
        aucs = {key: float(kv[f"auc.{key}"]) for key in CELL_KEYS if f"auc.{key}" in kv}
        absent = tuple(x for x in kv.get("absent", "").split(",") if x)
        agg = float(kv["aggregate"]) if "aggregate" in kv else None
        delta = float(kv["metric_delta"]) if "metric_delta" in kv else None
        return cls(aucs=aucs, absent=absent, aggregate=agg, delta_vs_baseline=delta)

    def to_markdown(self) -> str:
        lines = ["| cell | AUC |", "|---|---|"]
        for key in CELL_KEYS:
            if key in self.aucs:
                lines.append(f"| {key} | {self.aucs[key]:.6f} |")
            else:
                lines.append(f"| {key} | absent |")
        agg = "invalid" if self.aggregate is None else f"{self.aggregate:.6f}"
        lines.append(f"| **aggregate** | {agg} |")
        if self.delta_vs_baseline is not None:
            lines.append(f"| **delta vs baseline (pp)** | {self.delta_vs_baseline:+.4f} |")
        return "\n".join(lines)


def metric_M(predict_fn: Callable, source, split: DatasetSplit,
             baseline: MetricReport | None = None) -> MetricReport:
    """Six-cell AUC report over the eval window.

    ``predict_fn(packed_day) -> (n, >=6) scores`` whose first six columns
    follow the signal layout.  Cells missing a class are marked absent and
    leave the aggregate invalid.
    """
    scores: dict[str, list] = {k: [] for k in CELL_KEYS}
    labels: dict[str, list] = {k: [] for k in CELL_KEYS}
    for day in split.eval_days:
        packed = source.day(day)
        preds = np.asarray(predict_fn(packed))
        for scene in SceneId:
            rows = packed.scene == scene.value
            if not rows.any():
                continue
            for behavior in BEHAVIORS:
                idx = signal_index(behavior, scene)
                key = f"{behavior}_{SCENE_NAMES[scene]}"
                scores[key].append(preds[rows, idx])
                labels[key].append(packed.labels[rows, idx])

    aucs: dict[str, float] = {}
    absent = []
    for key in CELL_KEYS:
        if not scores[key]:
            absent.append(key)
            continue
        s = np.concatenate(scores[key])
        y = np.concatenate(labels[key])
        try:
            aucs[key] = auc(s, y)
        except UndefinedAUC:
            absent.append(key)

    aggregate = None
    delta = None
    if not absent:
        aggregate = float(np.mean([aucs[k] for k in CELL_KEYS]))
        if baseline is not None:
            if baseline.aggregate is None:
                raise ValueError("baseline report has an invalid aggregate")
            delta = (aggregate - baseline.aggregate) * 100.0
    return MetricReport(aucs=aucs, absent=tuple(absent), aggregate=aggregate,
                        delta_vs_baseline=delta)
