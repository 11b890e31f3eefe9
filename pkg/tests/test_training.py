import math

import numpy as np
import pytest

from rankforge.autodiff import Tensor
from rankforge.dataset import GeneratedSource, split_by_day
from rankforge.generator import GeneratorSpec
from rankforge.modelcfg import preset_variant
from rankforge.schedule import LrSchedule, ScheduleKind
from rankforge.training import (CancelSignal, CostModel, TrainRunSpec,
                                instability_score, loss_curve_csv,
                                multitask_loss, train)

SPEC = GeneratorSpec(days=9, examples_per_day=250)
SRC = GeneratedSource(SPEC, 3)


def run_spec(tag="V1", days=2, **kw):
    kw.setdefault("schedule", LrSchedule(ScheduleKind.CONSTANT, 2e-3))
    kw.setdefault("batch_size", 50)
    return TrainRunSpec(variant=preset_variant(tag, embed_dim=8), total_days=days,
                        seed=11, **kw)


def scalar_loss_reference(preds, labels):
    """Independent elementwise reference for the multi-task loss."""
    eps = 1e-12
    total = 0.0
    for i in range(preds.shape[0]):
        for j in range(preds.shape[1]):
            p, y = preds[i, j], labels[i, j]
            if j < 6:
                p = p * (1 - 2 * eps) + eps
                total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
            else:
                total += (p - y) ** 2
    return total / preds.size


class TestMultitaskLoss:
    def test_perfect_confident_predictions(self):
        labels = np.zeros((4, 10))
        labels[:, 0] = 1.0
        labels[:, 6:] = 0.5
        preds = labels.copy()
        loss = multitask_loss(Tensor(preds), labels)
        assert loss.item() <= 1e-10

    def test_half_predictions_give_ln2_per_binary_element(self):
        labels = np.zeros((3, 10))
        labels[0, 0] = 1.0
        preds = np.full((3, 10), 0.5)
        preds[:, 6:] = labels[:, 6:]  # zero the squared-error part
        loss = multitask_loss(Tensor(preds), labels)
        assert loss.item() == pytest.approx(math.log(2) * 18 / 30, rel=1e-9)

    def test_mixed_case_matches_scalar_reference(self):
        rng = np.random.default_rng(2)
        preds = rng.uniform(0.01, 0.99, size=(2, 10))
        labels = np.zeros((2, 10))
        labels[:, :6] = rng.integers(0, 2, size=(2, 6))
        labels[:, 6:] = rng.uniform(size=(2, 4))
        loss = multitask_loss(Tensor(preds), labels)
        assert loss.item() == pytest.approx(scalar_loss_reference(preds, labels), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            multitask_loss(Tensor(np.zeros((2, 10))), np.zeros((3, 10)))


class TestTrain:
    def test_deterministic_bitwise(self):
        a = train(run_spec(), SRC, split_by_day(SRC, 2))
        b = train(run_spec(), SRC, split_by_day(SRC, 2))
        assert a.loss_curve == b.loss_curve
        assert a.report.aucs == b.report.aucs
        assert a.gpu_hours == b.gpu_hours

    def test_v1_smoke_loss_decreases(self):
        spec = GeneratorSpec(days=10, examples_per_day=600)
        src = GeneratedSource(spec, 5)
        record = train(run_spec(days=3), src, split_by_day(src, 3))
        assert record.status == "Succeeded"
        assert record.loss_curve[-1] < record.loss_curve[0]

    def test_cancel_after_first_day(self):
        cancel = CancelSignal()

        class OneShotSource(GeneratedSource):
            def day(self, day):
                if day == 1:
                    cancel.cancel()  # arrives mid-day; honored at the next boundary
                return super().day(day)

        src = OneShotSource(SPEC, 3)
        record = train(run_spec(days=2), src, split_by_day(src, 2), cancel=cancel)
        assert record.status == "Cancelled"
        assert len(record.loss_curve) == 1
        # exactly one day's cost was charged
        from rankforge.models import build_model
        model = build_model(record.spec.variant, SPEC.dims(), record.spec.seed)
        assert record.gpu_hours == record.spec.cost_model.per_day(model.param_count)

    def test_loss_curve_length_equals_completed_days(self):
        record = train(run_spec(days=2), SRC, split_by_day(SRC, 2))
        assert len(record.loss_curve) == 2
        assert len(record.lr_curve) == 2

    def test_batch_order_is_schedule_independent(self):
        from rankforge.training import _batch_order
        a = _batch_order(7, 3, 101, 10)
        b = _batch_order(7, 3, 101, 10)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        c = _batch_order(8, 3, 101, 10)
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_nan_input_faults_run(self):
        class PoisonedSource(GeneratedSource):
            def day(self, day):
                packed = super().day(day)
                if day == 2:
                    packed.dense[0, 0] = np.nan
                return packed

        src = PoisonedSource(SPEC, 3)
        record = train(run_spec(days=2), src, split_by_day(src, 2))
        assert record.status == "Faulted"
        assert "day 2" in record.fault_reason
        assert len(record.loss_curve) == 1  # day 1 completed, day 2 not charged

    def test_lr_follows_schedule_per_day(self):
        sched = LrSchedule(ScheduleKind.HALF_DATA_FIFTH, 2e-3)
        record = train(run_spec(days=2, schedule=sched), SRC, split_by_day(SRC, 2))
        assert record.lr_curve == (2e-3, 2e-3 / 5)

    def test_snapshot_saved_when_requested(self, tmp_path):
        path = str(tmp_path / "model.rftn")
        record = train(run_spec(days=2), SRC, split_by_day(SRC, 2), snapshot_path=path)
        from rankforge.params import read_snapshot
        assert record.snapshot_path == path
        assert "embed.token" in read_snapshot(path)

    def test_loss_curve_csv(self):
        record = train(run_spec(days=2), SRC, split_by_day(SRC, 2))
        csv = loss_curve_csv(record)
        lines = csv.strip().split("\n")
        assert lines[0] == "day,mean_loss,lr"
        assert len(lines) == 3


class TestInstability:
    def test_monotone_descent_is_stable(self):
        rec = lambda curve: type("R", (), {"loss_curve": curve})()
        assert instability_score(rec((1.0, 0.8, 0.6, 0.5))) == 0.0

    def test_rising_tail_scores_high(self):
        rec = type("R", (), {"loss_curve": (1.0, 0.5, 0.9, 1.1)})()
        assert instability_score(rec) > 0.5

    def test_spec_round_trip(self):
        spec = run_spec(days=3)
        back = TrainRunSpec.from_kv(spec.to_kv())
        assert back == spec
