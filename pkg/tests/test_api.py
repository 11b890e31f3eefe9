import json
import threading
import time
import urllib.error
import urllib.request

import pytest

from rankforge.apiserver import ApiServer
from rankforge.dataset import GeneratedSource
from rankforge.generator import GeneratorSpec
from rankforge.memstore import MemoryStore
from rankforge.modelcfg import preset_variant
from rankforge.orchestrator import LoopConfig, LoopControl, RunDir, run_loop

TINY = GeneratorSpec(days=9, examples_per_day=100, max_seq_len=6, vocab_size=211,
                     num_items=96, min_seq_len=2)


def get(port, path):
    with urllib.request.urlopen(f"http://127.0.0.1:{port}{path}") as r:
        return json.loads(r.read())


def post(port, path, body=None):
    data = json.dumps(body or {}).encode()
    req = urllib.request.Request(f"http://127.0.0.1:{port}{path}", data=data,
                                 headers={"Content-Type": "application/json"},
                                 method="POST")
    with urllib.request.urlopen(req) as r:
        return json.loads(r.read())


def post_status(port, path, body=None):
    try:
        post(port, path, body)
        return 200
    except urllib.error.HTTPError as exc:
        return exc.code


@pytest.fixture
def live(tmp_path):
    """API server over a loop running with the expert gate required."""
    src = GeneratedSource(TINY, 1)
    cfg = LoopConfig(budget_gpu_hours=5.0, seed=3, batch_size=50,
                     gate_mode="RequireApproval",
                     initial_variant=preset_variant("V2", embed_dim=8))
    control = LoopControl()
    run_dir = str(tmp_path / "run")
    store = MemoryStore(RunDir(run_dir).memory)
    server = ApiServer(control, store, port=0)
    server.start()
    thread = threading.Thread(target=run_loop, args=(run_dir, src, cfg),
                              kwargs={"control": control}, daemon=True)
    thread.start()
    yield server.port, control, thread
    control.stop()
    thread.join(timeout=60)
    server.stop()


def wait_for(predicate, timeout=60.0, interval=0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise TimeoutError("condition not met")


class TestLiveApi:
    def test_gate_approval_advances_loop(self, live):
        port, control, thread = live
        pending = wait_for(lambda: get(port, "/api/state")["pending"])
        assert pending[0]["kind"] == "idea"
        round_before = get(port, "/api/state")["round"]
        post(port, f"/api/gate/{pending[0]['item_id']}/approve")
        # decision item follows after training; approve it as proposed
        decision = wait_for(
            lambda: [p for p in get(port, "/api/state")["pending"]
                     if p["kind"] == "decision"])
        post(port, f"/api/gate/{decision[0]['item_id']}/approve")
        wait_for(lambda: get(port, "/api/state")["round"] > round_before)

    def test_unknown_gate_item_404(self, live):
        port, control, _ = live
        wait_for(lambda: get(port, "/api/state")["pending"])
        assert post_status(port, "/api/gate/nope/approve") == 404

    def test_threshold_takes_effect_next_round(self, live):
        port, control, _ = live
        wait_for(lambda: get(port, "/api/state")["round"] >= 1)
        reply = post(port, "/api/control/threshold", {"value": 0.9})
        assert reply["applies_at_round"] >= 1

        def threshold_applied():
            snap = get(port, "/api/state")
            if snap["threshold"] == 0.9:
                return True
            for item in snap["pending"]:  # keep the loop moving through gates
                try:
                    post(port, f"/api/gate/{item['item_id']}/approve")
                except urllib.error.HTTPError:
                    pass
            return False

        wait_for(threshold_applied)

    def test_malformed_threshold_400(self, live):
        port, _, _ = live
        assert post_status(port, "/api/control/threshold", {}) == 400
        assert post_status(port, "/api/control/threshold", {"value": "x"}) == 400
        assert post_status(port, "/api/control/threshold", {"value": 7}) == 400

    def test_pause_resume(self, live):
        port, _, _ = live
        assert "applies_at_round" in post(port, "/api/control/pause")
        assert "applies_at_round" in post(port, "/api/control/resume")

    def test_events_long_poll(self, live):
        port, _, _ = live
        reply = get(port, "/api/events?mode=poll&after_seq=-1&timeout_s=30")
        assert reply["seq"] >= 0

    def test_state_internally_consistent(self, live):
        port, _, _ = live
        wait_for(lambda: get(port, "/api/state")["round"] >= 1)
        snap = get(port, "/api/state")
        run_ids = {e["run_id"] for e in snap["experiments"]}
        for node in snap["lineage"]["nodes"]:
            if node["run_id"] is not None:
                assert node["run_id"] in run_ids

    def test_memory_journey_endpoint(self, live):
        port, _, _ = live
        wait_for(lambda: get(port, "/api/state")["round"] >= 1)
        entries = get(port, "/api/memory/journey")
        assert entries and entries[0]["version_tag"] == "V2"


class TestAutoApproveServer:
    def test_gate_action_conflicts_in_auto_mode(self, tmp_path):
        control = LoopControl()
        control.publish({"round": 0, "gate_mode": "AutoApprove", "done": False})
        store = MemoryStore(RunDir(str(tmp_path)).memory)
        server = ApiServer(control, store, port=0)
        server.start()
        try:
            assert post_status(server.port, "/api/gate/x/approve") == 409
            assert post_status(server.port, "/api/unknown") == 404
        finally:
            server.stop()

    def test_curve_and_lineage_endpoints(self, tmp_path):
        control = LoopControl()
        control.publish({"round": 2, "gate_mode": "AutoApprove", "done": True,
                         "curve": [[0.1, 0.6, "V2"]],
                         "lineage": {"baseline": "V2", "nodes": []},
                         "experiments": []})
        store = MemoryStore(RunDir(str(tmp_path)).memory)
        server = ApiServer(control, store, port=0)
        server.start()
        try:
            assert get(server.port, "/api/curve") == [[0.1, 0.6, "V2"]]
            assert get(server.port, "/api/lineage")["baseline"] == "V2"
            assert get(server.port, "/api/experiments") == []
        finally:
            server.stop()
