"""Single-run training: day-ordered stream, per-day learning rate, multi-task
loss, and the resulting experiment record with AUCs and simulated gpu-hours."""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .dataset import DataSource, split_by_day
from .evaluation import MetricReport, metric_M
from .features import AUX_SIGNALS, BINARY_SIGNALS, DatasetSplit
from .modelcfg import VariantConfig
from .models import Batch, RankingModel, build_model
from .optim import AdamState, NonFiniteGradient, adam_step, clip_global_norm
from .schedule import LrSchedule, lr_at

GRAD_CLIP_NORM = 5.0
LOG_CLAMP = 1e-12  # predictions clamped away from {0,1} before log


@dataclass(frozen=True)
class CostModel:
    """Simulated gpu-hours charged per training day, scaled by model size."""

    kappa: float = 0.01

    def per_day(self, param_count: int) -> float:
        return self.kappa * param_count / 1e6


@dataclass(frozen=True)
class TrainRunSpec:
    variant: VariantConfig
    schedule: LrSchedule
    batch_size: int = 64
    total_days: int = 8
    seed: int = 0
    cost_model: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if self.total_days < 1:
            raise ValueError("total_days must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_kv(self) -> dict:
        out = {f"variant.{k}": v for k, v in self.variant.to_kv().items()}
        out.update(self.schedule.to_kv())
        out["batch_size"] = str(self.batch_size)
        out["total_days"] = str(self.total_days)
        out["seed"] = str(self.seed)
        out["cost_kappa"] = repr(self.cost_model.kappa)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "TrainRunSpec":
        variant = VariantConfig.from_kv(
            {k[len("variant."):]: v for k, v in kv.items() if k.startswith("variant.")})
        return cls(variant=variant, schedule=LrSchedule.from_kv(kv),
                   batch_size=int(kv["batch_size"]), total_days=int(kv["total_days"]),
                   seed=int(kv["seed"]),
                   cost_model=CostModel(kappa=float(kv.get("cost_kappa", "0.01"))))


@dataclass
class ExperimentRecord:
    run_id: str
    spec: TrainRunSpec
    status: str = "Queued"  # Queued | Running | Succeeded | Faulted | Cancelled
    loss_curve: tuple = ()  # per-day mean loss
    lr_curve: tuple = ()    # lr applied each day
    report: MetricReport | None = None
    metric_delta: float | None = None
    gpu_hours: float = 0.0
    fault_reason: str | None = None
    snapshot_path: str | None = None
    seq_len: int | None = None  # effective sequence length under the data dims

    @property
    def aggregate(self) -> float | None:
        return self.report.aggregate if self.report else None


class CancelSignal:
    """Thread-safe flag checked at day boundaries."""

    def __init__(self):
        self._event = threading.Event()

    def cancel(self):
        self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()


def multitask_loss(predictions: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over batch and tasks: BCE on binary signals, squared error on
    real-valued ones.  Predictions are clamped at 1e-12 before the log."""
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} vs labels {labels.shape}")
    p_bin = ad.narrow(predictions, 1, BINARY_SIGNALS[0], len(BINARY_SIGNALS))
    y_bin = labels[:, list(BINARY_SIGNALS)]
    clamped = ad.mul(p_bin, Tensor(1.0 - 2 * LOG_CLAMP))
    clamped = ad.add(clamped, Tensor(LOG_CLAMP))
    bce = ad.neg(ad.add(ad.mul(Tensor(y_bin), ad.log(clamped)),
                        ad.mul(Tensor(1.0 - y_bin), ad.log(ad.add(ad.neg(clamped), Tensor(1.0))))))

    p_aux = ad.narrow(predictions, 1, AUX_SIGNALS[0], len(AUX_SIGNALS))
    diff = ad.sub(p_aux, Tensor(labels[:, list(AUX_SIGNALS)]))
    se = ad.mul(diff, diff)

    total = ad.add(ad.sum_all(bce), ad.sum_all(se))
    return ad.mul(total, Tensor(1.0 / labels.size))


def _batch_order(seed: int, day: int, n: int, batch_size: int) -> list:
    """Seeded shuffled batch index lists; depends only on (seed, day, n)."""
    digest = hashlib.blake2b(f"batches:{seed}:{day}".encode(), digest_size=16).digest()
    rng = np.random.Generator(np.random.Philox(key=np.frombuffer(digest, dtype=np.uint64)))
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(spec: TrainRunSpec, source: DataSource, split: DatasetSplit | None = None,
          cancel: CancelSignal | None = None,
          baseline: MetricReport | None = None,
          run_id: str | None = None,
          snapshot_path: str | None = None) -> ExperimentRecord:
    """Run one experiment: train over the day stream, then evaluate.

    Deterministic per (spec, source, seed).  Non-finite losses fault the run;
    cancellation keeps the partial loss curve and the gpu-hours already spent.
    """
    if split is None:
        split = split_by_day(source, spec.total_days)
    if list(split.train_days) != list(range(1, spec.total_days + 1)):
        raise ValueError("split train days must cover 1..total_days")

    record = ExperimentRecord(run_id=run_id or f"run-{spec.variant.version_tag}",
                              spec=spec, status="Running",
                              seq_len=spec.variant.effective_seq_len(
                                  source.spec.num_slots, source.spec.max_seq_len))
    model = build_model(spec.variant, source.spec.dims(), spec.seed)
    params = model.params.tensors()
    opt = AdamState(params)
    cost_per_day = spec.cost_model.per_day(model.param_count)

    losses: list[float] = []
    lrs: list[float] = []
    for day in split.train_days:
        if cancel is not None and cancel.is_set():
            record.status = "Cancelled"
            record.loss_curve = tuple(losses)
            record.lr_curve = tuple(lrs)
            return record
        lr = lr_at(spec.schedule, day / spec.total_days)
        packed = source.day(day)
        day_losses = []
        try:
            for rows in _batch_order(spec.seed, day, len(packed), spec.batch_size):
                batch = Batch.from_packed(packed, rows)
                model.params.zero_grads()
                preds = model.forward(batch)
                loss = multitask_loss(preds, packed.labels[rows])
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(f"non-finite loss on day {day}")
                backward(loss)
                clip_global_norm(params, GRAD_CLIP_NORM)
                adam_step(params, opt, lr)
                day_losses.append(value)
        except (FloatingPointError, NonFiniteGradient) as exc:
            # gpu_hours stays at the completed-day sum; the faulted day is not charged
            record.status = "Faulted"
            record.fault_reason = f"day {day}: {exc}"
            record.loss_curve = tuple(losses)
            record.lr_curve = tuple(lrs)
            return record
        losses.append(float(np.mean(day_losses)))
        lrs.append(lr)
        record.gpu_hours += cost_per_day

    record.loss_curve = tuple(losses)
    record.lr_curve = tuple(lrs)
    record.report = metric_M(model.predict_packed, source, split, baseline=baseline)
    if not record.report.valid:
        record.status = "Faulted"
        record.fault_reason = f"single-class eval cells: {','.join(record.report.absent)}"
        return record
    record.metric_delta = record.report.delta_vs_baseline
    record.status = "Succeeded"
    if snapshot_path is not None:
        model.params.save(snapshot_path)
        record.snapshot_path = snapshot_path
    return record


def loss_curve_csv(record: ExperimentRecord) -> str:
    lines = ["day,mean_loss,lr"]
    for i, (loss, lr) in enumerate(zip(record.loss_curve, record.lr_curve), start=1):
        lines.append(f"{i},{repr(loss)},{repr(lr)}")
    return "\n".join(lines) + "\n"


def instability_score(record: ExperimentRecord) -> float:
    """Loss-curve instability in [0, 1]: fraction of day-over-day increases,
    blended with how far the final day sits above the curve minimum."""
    curve = record.loss_curve
    if len(curve) < 2:
        return 0.0
    diffs = np.diff(curve)
    upticks = float((diffs > 0).mean())
    lo, hi = min(curve), max(curve)
    tail = (curve[-1] - lo) / (hi - lo) if hi > lo else 0.0
    return float(0.5 * upticks + 0.5 * tail)
