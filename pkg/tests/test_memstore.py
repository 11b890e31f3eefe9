import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankforge.evaluation import CELL_KEYS, MetricReport
from rankforge.memstore import (DuplicateEntry, FlowEntry, JourneyEntry,
                                MemoryError_, MemoryIndex, MemoryParseError,
                                MemoryStore, StoreLocked, VersionDoc,
                                decode_value, encode_value, experiment_from_kv,
                                experiment_to_kv, parse_blocks, render_block)
from rankforge.modelcfg import preset_variant
from rankforge.schedule import LrSchedule, ScheduleKind
from rankforge.training import ExperimentRecord, TrainRunSpec


@pytest.fixture
def store(tmp_path):
    s = MemoryStore(str(tmp_path / "memory"))
    s.init_store()
    return s


def journey(tag="V3.0", **kw):
    kw.setdefault("timestamp", "1.0")
    kw.setdefault("idea_id", "add-positional-encoding")
    kw.setdefault("summary", "try positional encoding")
    return JourneyEntry(version_tag=tag, **kw)


def experiment(run_id="run-V2"):
    spec = TrainRunSpec(variant=preset_variant("V2"),
                        schedule=LrSchedule(ScheduleKind.CONSTANT, 2e-3),
                        total_days=3, seed=9)
    report = MetricReport(aucs={k: 0.61 for k in CELL_KEYS}, aggregate=0.61,
                          delta_vs_baseline=0.5)
    return ExperimentRecord(run_id=run_id, spec=spec, status="Succeeded",
                            loss_curve=(0.7, 0.6, 0.5), lr_curve=(2e-3,) * 3,
                            report=report, metric_delta=0.5, gpu_hours=0.012,
                            snapshot_path="snapshots/run-V2.rftn")


text_values = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), max_size=80)


class TestValueCodec:
    @given(text_values)
    @settings(max_examples=300)
    def test_round_trip(self, value):
        assert decode_value(encode_value(value)) == value

    @given(st.dictionaries(st.from_regex(r"[a-z][a-z0-9_.]{0,10}", fullmatch=True),
                           text_values, min_size=1, max_size=8))
    @settings(max_examples=200)
    def test_block_round_trip(self, kv):
        block = render_block("journey", kv)
        parsed = parse_blocks(block)
        assert len(parsed) == 1
        assert parsed[0][1] == kv


class TestEntryRoundTrips:
    @given(outcome=st.sampled_from(["Pending", "Success", "Failed", "Reverted"]),
           lesson=text_values, delta=st.none() | st.floats(allow_nan=False, allow_infinity=False))
    @settings(max_examples=200)
    def test_journey_round_trip(self, outcome, lesson, delta):
        entry = journey(outcome=outcome, lesson=lesson, metric_delta=delta)
        assert JourneyEntry.from_kv(entry.to_kv()) == entry

    def test_journey_unicode_multiline_lesson(self, store):
        entry = journey(lesson="línea uno\nline two — emdash\n\ttabbed 日本語")
        store.append_journey(entry)
        index = store.load_index()
        assert index.journey == [entry]

    def test_experiment_round_trip(self):
        record = experiment()
        back = experiment_from_kv(experiment_to_kv(record, "3.1"))
        assert back == record

    def test_flow_round_trip(self):
        entry = FlowEntry(timestamp="2.0", flow_id="flow-1", version_tag="V3.1",
                          schedule_kind="Constant", base_lr=2e-3, status="Submitted")
        assert FlowEntry.from_kv(entry.to_kv()) == entry

    def test_version_doc_round_trip(self, store):
        doc = VersionDoc(version_tag="V3.3", kind="IMPLEMENTATION",
                         config=preset_variant("V3.3"),
                         mutations=("SetToggle:slot_type_embeddings=true",),
                         param_report="171k params", notes="adds slot table")
        store.write_version_doc(doc, current_version="V3.3")
        back = store.read_version_doc("V3.3", "IMPLEMENTATION")
        assert back == doc
        assert back.config == doc.config


class TestAppendParse:
    def test_append_then_parse_equal(self, store):
        entry = journey()
        store.append_journey(entry)
        assert store.load_index().journey == [entry]

    def test_two_appends_preserve_order(self, store):
        store.append_journey(journey("V3.0"))
        store.append_journey(journey("V3.1", idea_id="unify"))
        tags = [e.version_tag for e in store.load_index().journey]
        assert tags == ["V3.0", "V3.1"]

    def test_duplicate_id_rejected(self, store):
        store.append_journey(journey())
        with pytest.raises(DuplicateEntry):
            store.append_journey(journey())

    def test_randomized_append_parse_property(self, store):
        rng = np.random.default_rng(0)
        entries = []
        for i in range(40):
            entries.append(journey(f"V3.{i}", lesson=f"lesson {rng.integers(1000)}",
                                   metric_delta=float(rng.normal())))
            store.append_journey(entries[-1])
        assert store.load_index().journey == entries

    def test_hand_edited_prose_between_blocks_ignored(self, store):
        store.append_journey(journey("V3.0"))
        path = store.path("JOURNEY.md")
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("\nReviewer note: looks plausible, discuss at standup.\n")
        store.append_journey(journey("V3.1", idea_id="unify"))
        index = store.load_index()
        assert [e.version_tag for e in index.journey] == ["V3.0", "V3.1"]

    def test_malformed_block_reports_file_and_line(self, store):
        path = store.path("JOURNEY.md")
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("\n<!--rf:journey\nbroken line without equals\n-->\n")
        with pytest.raises(MemoryParseError, match=r"JOURNEY\.md:\d+"):
            store.load_index()

    def test_fresh_store_empty_index_with_headers(self, store):
        index = store.load_index()
        assert index.journey == [] and index.experiments == [] and index.flows == []
        for name in ("JOURNEY.md", "EXPERIMENTS.md", "FLOWS.md"):
            assert os.path.isfile(store.path(name))
            assert open(store.path(name)).readline().startswith("# ")

    def test_double_init_rejected(self, store):
        with pytest.raises(MemoryError_, match="already initialized"):
            store.init_store()


class TestUpdates:
    def test_outcome_transition_pending_to_final(self, store):
        store.append_journey(journey(outcome="Pending"))
        store.update_journey("V3.0", outcome="Failed", lesson="no gain",
                             metric_delta=-0.047)
        entry = store.load_index().journey[0]
        assert entry.outcome == "Failed"
        assert entry.metric_delta == -0.047

    def test_final_to_final_rejected(self, store):
        store.append_journey(journey(outcome="Pending"))
        store.update_journey("V3.0", outcome="Failed")
        with pytest.raises(MemoryError_, match="Pending->final"):
            store.update_journey("V3.0", outcome="Success")

    def test_update_missing_entry_rejected(self, store):
        with pytest.raises(MemoryError_, match="no journey entry"):
            store.update_journey("V9.9", outcome="Failed")

    def test_flow_status_update(self, store):
        store.append_flow(FlowEntry("1", "flow-1", "V3.1", "Constant", 2e-3))
        store.update_flow("flow-1", status="Succeeded")
        assert store.load_index().flows[0].status == "Succeeded"

    def test_update_preserves_other_entries_and_prose(self, store):
        store.append_journey(journey("V3.0"))
        path = store.path("JOURNEY.md")
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("\nHand note kept verbatim.\n")
        store.append_journey(journey("V3.1", idea_id="unify"))
        store.update_journey("V3.0", outcome="Failed")
        text = open(path, encoding="utf-8").read()
        assert "Hand note kept verbatim." in text
        index = store.load_index()
        assert index.journey[0].outcome == "Failed"
        assert index.journey[1].version_tag == "V3.1"


class TestAtomicityAndLock:
    def test_crash_between_temp_and_rename_leaves_original(self, store):
        store.append_journey(journey("V3.0"))
        before = open(store.path("JOURNEY.md"), encoding="utf-8").read()

        def exploding_replace(src, dst):
            raise OSError("simulated crash before rename")

        store._replace = exploding_replace
        with pytest.raises(OSError, match="simulated crash"):
            store.append_journey(journey("V3.1", idea_id="unify"))
        store._replace = os.replace
        after = open(store.path("JOURNEY.md"), encoding="utf-8").read()
        assert after == before
        assert [e.version_tag for e in store.load_index().journey] == ["V3.0"]

    def test_concurrent_writer_lock(self, tmp_path):
        s = MemoryStore(str(tmp_path / "m"), lock_retries=3, lock_wait_s=0.01)
        s.init_store()
        lock_path = s.path(".lock")
        with open(lock_path, "w") as fh:
            fh.write("12345")
        with pytest.raises(StoreLocked):
            s.append_journey(journey())
        os.unlink(lock_path)
        s.append_journey(journey())  # retries succeed once the lock clears


class TestSecondLayer:
    def doc(self, tag):
        return VersionDoc(version_tag=tag, kind="IMPLEMENTATION",
                          config=preset_variant("V3.3").with_tag(tag),
                          notes=f"doc for {tag}")

    def test_load_index_never_touches_second_layer(self, tmp_path):
        reads = []
        store = MemoryStore(str(tmp_path / "m"), file_reader=reads.append)
        store.init_store()
        store.append_journey(journey())
        store.write_version_doc(self.doc("V3.0"), "V3.0")
        reads.clear()
        store.load_index()
        assert reads, "expected first-layer reads"
        assert not any("versions" in p for p in reads)

    def test_prior_version_docs_untouched(self, store):
        import hashlib
        store.write_version_doc(self.doc("V3.2"), "V3.2")
        p32 = store.path(os.path.join("versions", "V3.2_IMPLEMENTATION.md"))
        digest = hashlib.sha256(open(p32, "rb").read()).hexdigest()
        store.write_version_doc(self.doc("V3.3"), "V3.3")
        assert hashlib.sha256(open(p32, "rb").read()).hexdigest() == digest

    def test_non_current_version_write_rejected(self, store):
        with pytest.raises(MemoryError_, match="current"):
            store.write_version_doc(self.doc("V3.1"), current_version="V3.2")

    def test_exactly_one_link_per_version_kind(self, store):
        for _ in range(3):
            store.write_version_doc(self.doc("V3.2"), "V3.2")
        index = store.load_index()
        assert index.doc_links.count(("V3.2", "IMPLEMENTATION")) == 1
