import numpy as np
import pytest

from rankforge.schedule import (LrSchedule, ScheduleKind, lr_at, preset_schedule,
                                reference_phase_table)

# The 28-day reference schedule: days 1-16 -> 5e-5, 17-19 -> 1e-5,
# 20-23 -> 1.5e-5, 24-28 -> 8e-6.
PAPER_TABLE = ((16 / 28, 5e-5), (19 / 28, 1e-5), (23 / 28, 1.5e-5), (1.0, 8e-6))


def paper_schedule():
    return LrSchedule(ScheduleKind.FOUR_PHASE, base_lr=5e-5, phase_table=PAPER_TABLE)


class TestFourPhasePinning:
    @pytest.mark.parametrize("day,expected", [
        (1, 5e-5), (16, 5e-5),   # phase 0 incl. boundary
        (17, 1e-5), (18, 1e-5), (19, 1e-5),
        (20, 1.5e-5), (22, 1.5e-5), (23, 1.5e-5),
        (24, 8e-6), (28, 8e-6),
    ])
    def test_reference_days(self, day, expected):
        assert lr_at(paper_schedule(), day / 28) == expected

    def test_partition_validated(self):
        with pytest.raises(ValueError, match="partition"):
            LrSchedule(ScheduleKind.FOUR_PHASE, 5e-5,
                       phase_table=((0.3, 1e-4), (0.5, 1e-5), (0.7, 2e-5), (0.9, 1e-6)))
        with pytest.raises(ValueError, match="4 phases"):
            LrSchedule(ScheduleKind.FOUR_PHASE, 5e-5, phase_table=((1.0, 1e-5),))
        with pytest.raises(ValueError, match="increasing"):
            LrSchedule(ScheduleKind.FOUR_PHASE, 5e-5,
                       phase_table=((0.5, 1e-4), (0.4, 1e-5), (0.7, 2e-5), (1.0, 1e-6)))

    def test_phase_table_only_for_four_phase(self):
        with pytest.raises(ValueError):
            LrSchedule(ScheduleKind.CONSTANT, 1e-4, phase_table=((1.0, 1e-4),))


class TestHalfDataFifth:
    def test_base_until_midpoint_then_fifth(self):
        s = LrSchedule(ScheduleKind.HALF_DATA_FIFTH, 5e-5)
        assert lr_at(s, 0.25) == 5e-5
        assert lr_at(s, 0.5) == 5e-5
        assert lr_at(s, 0.75) == 1e-5
        assert lr_at(s, 1.0) == 1e-5

    def test_exactly_one_fifth(self):
        s = LrSchedule(ScheduleKind.HALF_DATA_FIFTH, 3e-3)
        assert lr_at(s, 0.9) == 3e-3 / 5.0


class TestContract:
    def test_progress_out_of_range_rejected(self):
        s = LrSchedule(ScheduleKind.CONSTANT, 1e-4)
        for bad in (0.0, -0.1, 1.01):
            with pytest.raises(ValueError):
                lr_at(s, bad)

    def test_nonpositive_base_rejected(self):
        with pytest.raises(ValueError):
            LrSchedule(ScheduleKind.CONSTANT, 0.0)

    def test_piecewise_constant_total_variation(self):
        s = paper_schedule()
        days = 28
        values = [lr_at(s, d / days) for d in range(1, days + 1)]
        jumps = [abs(b - a) for a, b in zip(values, values[1:]) if b != a]
        phase_lrs = [lr for _, lr in PAPER_TABLE]
        expected = [abs(b - a) for a, b in zip(phase_lrs, phase_lrs[1:])]
        assert jumps == expected
        assert sum(jumps) == pytest.approx(sum(expected))

    def test_kv_round_trip(self):
        for s in (LrSchedule(ScheduleKind.CONSTANT, 4e-3),
                  LrSchedule(ScheduleKind.HALF_DATA_FIFTH, 2.5e-3),
                  paper_schedule()):
            assert LrSchedule.from_kv(s.to_kv()) == s

    def test_presets(self):
        assert preset_schedule("V2", 1e-3).kind == ScheduleKind.CONSTANT
        assert preset_schedule("V3.2", 1e-3).kind == ScheduleKind.HALF_DATA_FIFTH
        v35 = preset_schedule("V3.5", 1e-3)
        assert v35.kind == ScheduleKind.FOUR_PHASE
        assert v35.phase_table == reference_phase_table(1e-3)

    def test_reference_fractions_match_reference_run(self):
        # scaled shape: base, base/5, plateau raise, final fine-tune below base/5
        table = reference_phase_table(5e-5)
        assert [round(f, 6) for f, _ in table] == [round(f, 6) for f in
                                                   (16 / 28, 19 / 28, 23 / 28, 1.0)]
        lrs = [lr for _, lr in table]
        assert lrs[1] == pytest.approx(5e-5 / 5)
        assert lrs[2] > lrs[1]
        assert lrs[3] < lrs[1]
