import json
import threading

import numpy as np
import pytest

from evmarker.core import Pose
from evmarker.events import EVENT_DTYPE, NoiseFilter
from evmarker.pipeline import (BoundedQueue, PipelineConfig, QueueClosed, TrackerRegistry,
                               load_config, measure_latency, run_pipeline, write_outputs)
from evmarker.pipeline import SpawnRequest, TrackerHandle
from evmarker.simulator import evaluate_tracking
from evmarker.tracker import PoseSamples

from helpers import CAM, MODEL, cruise_scene, exit_scene, fronto_pose, handoff_scene

SINGLE = PipelineConfig(concurrent=False)


def _filtered(ev, cfg):
    """Reference filter pass over the same batches the pipeline sees."""
    f = NoiseFilter(CAM.width, CAM.height, cfg.filter)
    out = []
    for s in range(0, len(ev), cfg.batch_size):
        b = ev[s:s + cfg.batch_size]
        out.append(b[f.mask(b)])
    return out


# ---- config

def test_load_config_defaults_and_overrides(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text("[pipeline]\ndetector_period = 20000\n[tracker]\nupdate_every_n = 50\n"
                 "[backtrack]\neps_t = 7.5\n")
    cfg = load_config(f, {"tracker.update_every_n": "25", "pipeline.concurrent": "false"})
    assert cfg.detector_period == 20000
    assert cfg.tracker.update_every_n == 25
    assert cfg.backtrack.eps_t == 7.5
    assert cfg.concurrent is False
    assert load_config() == PipelineConfig()
    assert PipelineConfig().queue_capacity == 1 << 20 and PipelineConfig().detector_period == 50_000


@pytest.mark.parametrize("bad", [{"tracker.nope": "1"}, {"mystery.key": "1"},
                                 {"pipeline.concurrent": "maybe"}, {"pipeline.detector_period": "0"}])
def test_load_config_rejects(bad):
    with pytest.raises(ValueError):
        load_config(None, bad)


# ---- queue

def test_queue_blocks_when_full():
    q = BoundedQueue(10)
    q.put("a", 6)
    done = threading.Event()

    def producer():
        q.put("b", 6)
        done.set()

    th = threading.Thread(target=producer)
    th.start()
    assert not done.wait(0.1)
    assert q.get() == "a"
    assert done.wait(1.0)
    assert q.get() == "b"
    q.close()
    with pytest.raises(QueueClosed):
        q.get()
    th.join()


def test_queue_drop_oldest_counts():
    q = BoundedQueue(10, drop_oldest=True)
    for i in range(5):
        q.put(i, 4)
    assert q.dropped_items == 3 and q.dropped_size == 12
    assert [q.get(), q.get()] == [3, 4]
    with pytest.raises(TimeoutError):
        q.get(timeout=0.01)


def test_queue_fifo_across_threads():
    q = BoundedQueue(64)
    got = []

    def consumer():
        while True:
            try:
                got.append(q.get())
            except QueueClosed:
                return

    th = threading.Thread(target=consumer)
    th.start()
    for i in range(5000):
        q.put(i, 1 + i % 7)
    q.close()
    th.join()
    assert got == list(range(5000))
    assert q.max_size <= 64


# ---- registry

class _H:
    def __init__(self, mid, gen):
        self.marker_id, self.generation = mid, gen


def test_registry_claim_activate_deregister():
    reg = TrackerRegistry()
    req = SpawnRequest(3, fronto_pose(), 0, 0)
    assert reg.claim(req)
    assert not reg.claim(req)  # pending blocks a second spawn
    reg.activate(_H(3, 1))
    assert not reg.claim(req)  # active blocks too
    assert reg.deregister(3, generation=2) is None  # stale generation
    assert reg.deregister(3, generation=1) is not None
    assert 3 not in reg.ids()
    assert reg.claim(req)  # detectable again


def test_registry_stress():
    reg = TrackerRegistry()
    violations = []
    gen = iter(range(10**9))
    lock = threading.Lock()

    def worker(seed):
        rng = np.random.default_rng(seed)
        for _ in range(3000):
            mid = int(rng.integers(0, 4))
            if rng.random() < 0.6:
                if reg.claim(SpawnRequest(mid, fronto_pose(), 0, 0)):
                    with lock:
                        g = next(gen)
                    try:
                        reg.activate(_H(mid, g))
                    except RuntimeError:
                        violations.append(mid)
            else:
                reg.deregister(mid)
            with reg._lock:
                if len(reg.active) != len(set(reg.active)):
                    violations.append("dup")

    ths = [threading.Thread(target=worker, args=(s,)) for s in range(8)]
    for t in ths:
        t.start()
    for t in ths:
        t.join()
    assert not violations
    assert reg.max_per_id == 1


def test_pipeline_one_tracker_per_id_under_stress():
    ev, _ = handoff_scene()
    cfg = PipelineConfig(detector_period=2_000, batch_size=512)
    res = run_pipeline(ev, CAM, cfg)
    assert res.spawns and res.metrics["detector_passes"] > 20
    spans = {}
    for s in res.spawns:
        spans.setdefault(s["marker_id"], []).append(s)
    for mid, ss in spans.items():
        drops = {d["generation"]: d["t"] for d in res.deregistrations if d["marker_id"] == mid}
        ss.sort(key=lambda s: s["generation"])
        for a, b in zip(ss, ss[1:]):
            # the next generation only starts after the previous one was dropped
            assert a["generation"] in drops and b["spawn_t"] >= drops[a["generation"]]


# ---- handoff and replay

@pytest.mark.parametrize("concurrent", [False, True])
def test_no_event_loss_at_handoff(concurrent):
    ev, _ = handoff_scene()
    cfg = PipelineConfig(concurrent=concurrent, detection_delay=30_000 if not concurrent else 0,
                         record_consumed=True, batch_size=1024)
    res = run_pipeline(ev, CAM, cfg)
    assert len(res.spawns) == 1 and not res.deregistrations
    sp = res.spawns[0]
    kept = _filtered(ev, cfg)
    expect = np.concatenate([b["t"] for b in kept[sp["snapshot_seq"] + 1:]])
    got = res.consumed[sp["generation"]]
    assert np.array_equal(got, expect)
    if not concurrent:
        assert sp["replayed_events"] > 0  # the delay forces a buffered replay
        assert sp["spawn_t"] - sp["snapshot_t"] >= 30_000


def test_delayed_spawn_matches_immediate():
    ev, _ = handoff_scene()
    a = run_pipeline(ev, CAM, SINGLE)
    b = run_pipeline(ev, CAM, PipelineConfig(concurrent=False, detection_delay=30_000))
    assert b.spawns[0]["replayed_events"] > 0
    assert np.array_equal(a.poses[7].t, b.poses[7].t)
    assert np.array_equal(a.poses[7].translation, b.poses[7].translation)


def test_pose_stream_strictly_increasing():
    ev, _ = handoff_scene()
    for cfg in (SINGLE, PipelineConfig()):
        res = run_pipeline(ev, CAM, cfg)
        for s in res.poses.values():
            assert np.all(np.diff(s.t) > 0)


def test_deterministic_single_context():
    ev, _ = handoff_scene()
    outs = []
    for _ in range(3):
        r = run_pipeline(ev, CAM, SINGLE)
        m = dict(r.metrics)
        m.pop("throughput")
        m.pop("latency_ms")
        blob = b"".join(s.t.tobytes() + s.translation.tobytes() + s.rotation.tobytes()
                        for s in r.poses.values())
        rep = [(x.window_end_t, x.d_t, x.d_r, x.lost) for x in r.reports]
        outs.append((blob, rep, json.dumps(m, sort_keys=True, default=str)))
    assert outs[0] == outs[1] == outs[2]


# ---- scenes

def test_exit_and_reentry():
    ev, truth = exit_scene()
    res = run_pipeline(ev, CAM, SINGLE)
    assert [s["marker_id"] for s in res.spawns] == [7, 7]
    assert [d["reason"] for d in res.deregistrations] == ["out_of_view"]
    d = res.deregistrations[0]
    assert res.spawns[1]["spawn_t"] > d["t"]
    # out of view means the projected centre really left the sensor around then
    T = truth.pose(int((d["t"] - truth.t[0]) // 100)).translation
    assert 600 * T[0] / T[2] + 320 > 600
    rep = evaluate_tracking(res.poses[7], truth)
    assert rep.translation_mean_mm < 5


@pytest.mark.xfail(strict=True, reason="a marker outside the sensor emits no events, so no window "
                                      "completes and the backtracker has nothing to flag")
def test_exit_flagged_by_backtracker():
    ev, _ = exit_scene()
    res = run_pipeline(ev, CAM, PipelineConfig(concurrent=False, check_view=False))
    assert any(r.lost for r in res.reports)
    assert len(res.spawns) == 2


@pytest.mark.parametrize("source", [np.empty(0, EVENT_DTYPE), None, []])
@pytest.mark.parametrize("concurrent", [False, True])
def test_empty_source(source, concurrent):
    res = run_pipeline(source, CAM, PipelineConfig(concurrent=concurrent))
    assert res.poses == {} and res.spawns == [] and res.reports == []
    assert res.metrics["events"]["read"] == 0


def test_cruise_single_tracker_coverage():
    ev, truth = cruise_scene()
    res = run_pipeline(ev, CAM, PipelineConfig())
    assert len(res.spawns) == 1 and res.deregistrations == []
    rep = evaluate_tracking(res.poses[7], truth)
    assert rep.coverage >= 0.95
    assert rep.translation_mean_mm <= 5 and rep.rotation_mean_rad <= 0.05


# ---- latency isolation

class _InstantTracker:
    """Consumer stub: one sample per batch, no work."""

    def __init__(self, model, intr, pose, cfg):
        self.pose = pose
        self.lost_geometry = False

    def process(self, batch, return_matched=False):
        s = PoseSamples(batch["t"][-1:].astype(np.int64), self.pose.translation[None].copy(),
                        self.pose.rotation[None].copy())
        return s, np.zeros(len(batch), bool), np.array([len(batch) - 1])


def test_latency_is_queue_time_with_instant_consumer():
    ev, _ = handoff_scene()
    cfg = PipelineConfig(batch_size=1024, verify=False)
    res = run_pipeline(ev, CAM, cfg, tracker_factory=_InstantTracker, pace=0.5)
    bt = res.batch_times
    assert len(res.latency_s) > 10
    # processing after dequeue is negligible, so latency is queue residence
    work = bt[:, 2] - bt[:, 1]
    assert np.median(work) < 5e-4
    live = res.latency_s[~res.latency_replayed]
    resident = bt[:, 2] - bt[:, 0]
    assert np.median(live) == pytest.approx(np.median(resident[-len(live):]), abs=2e-3)


def test_measure_latency_reports():
    ev, _ = handoff_scene()
    rep = measure_latency(ev, CAM, event_rate=1e6)
    s = rep.summary()
    assert set(s) >= {"mean_ms", "std_ms", "p99_ms", "first_ms"}
    assert rep.n > 0 and np.isfinite(rep.mean_ms)
    assert rep.mean_ms < 10.0


# ---- outputs

def test_write_outputs(tmp_path):
    ev, _ = handoff_scene()
    res = run_pipeline(ev, CAM, SINGLE)
    paths = write_outputs(res, tmp_path / "out")
    assert {"poses", "poses_7", "backtrack", "metrics"} <= set(paths)
    m = json.loads(paths["metrics"].read_text())
    assert set(m["events"]) == {"read", "filtered_out", "kept", "matched", "discarded"}
    assert m["trackers"][0]["updates"] == len(res.poses[7])
    lines = paths["poses"].read_text().splitlines()
    assert lines[0].startswith("t_us,marker_id,tx,ty,tz,r11")
    assert len(lines) == 1 + len(res.poses[7])
    row = np.array(lines[1].split(","), float)
    R = row[5:].reshape(3, 3)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
