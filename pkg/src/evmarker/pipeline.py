"""End-to-end orchestration.

Four stages joined by bounded queues:

1. ingest: read batches, run the noise filter, paint the event frame;
2. detector: every ``detector_period`` µs of event time, snapshot the frame,
   look for markers that are not tracked yet and ask for trackers;
3. trackers: feed every batch to each active tracker (one worker per tracker),
   start new trackers by replaying the batches received since their snapshot;
4. verify/output: backtrack finished windows and deregister lost trackers.

``PipelineConfig.concurrent = False`` runs the same stages in one thread, in
a fixed order, which makes the output bit-identical from run to run.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import math
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backtracker import BacktrackConfig, BacktrackReport, TrackingWindows, backtrack_window, write_reports
from .core import CameraIntrinsics, MarkerModel, Pose
from .detector import DetectorConfig, MarkerDictionary, default_dictionary, detect_markers
from .events import EVENT_DTYPE, EventFrame, NoiseFilter, NoiseFilterConfig, read_events
from .simulator import write_poses
from .tracker import PoseSamples, Tracker, TrackerConfig

__all__ = [
    "PipelineConfig",
    "BoundedQueue",
    "TrackerRegistry",
    "TrackerHandle",
    "PipelineResult",
    "run_pipeline",
    "load_config",
    "write_outputs",
    "bench_throughput",
    "BenchRow",
    "BenchReport",
    "measure_latency",
    "LatencyReport",
]


@dataclass(frozen=True)
class PipelineConfig:
    filter: NoiseFilterConfig = field(default_factory=NoiseFilterConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    backtrack: BacktrackConfig = field(default_factory=BacktrackConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    detector_period: int = 50_000
    queue_capacity: int = 1 << 20  # events
    batch_size: int = 4096
    live: bool = False  # drop oldest on overflow instead of blocking
    concurrent: bool = True
    verify: bool = True
    filter_enabled: bool = True
    detection_delay: int = 0  # single-context mode: event time between snapshot and spawn
    stale_timeout: int = 200_000  # deregister after this long without an update
    check_view: bool = True  # deregister when the projected centre leaves the sensor
    history: int = 1_000_000  # µs of filtered events kept for replay
    frame_max_age: int | None = None
    record_consumed: bool = False

    def __post_init__(self):
        if self.detector_period <= 0:
            raise ValueError("detector_period must be positive")
        if self.queue_capacity <= 0:
            raise ValueError("queue_capacity must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.detection_delay < 0:
            raise ValueError("detection_delay must be >= 0")


# --------------------------------------------------------------------------
# config file

_SECTIONS = {"filter": NoiseFilterConfig, "tracker": TrackerConfig,
             "backtrack": BacktrackConfig, "detector": DetectorConfig}


def _coerce(value: str, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int) or default is None and value.strip().lstrip("-").isdigit():
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, dict):
        out = {}
        for item in filter(None, (s.strip() for s in value.split(","))):
            k, v = item.split(":")
            out[int(k)] = float(v)
        return out
    return value.strip()


def _apply_section(obj, items: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    kw = {}
    for k, v in items.items():
        if k not in known:
            raise ValueError(f"[{where}] unknown key {k!r}")
        kw[k] = _coerce(v, getattr(obj, k))
    return dataclasses.replace(obj, **kw)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """INI-style config: ``[pipeline]``, ``[filter]``, ``[tracker]``,
    ``[backtrack]``, ``[detector]``. ``overrides`` maps ``section.key`` to a
    string value and wins over the file."""
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    for key, value in (overrides or {}).items():
        sec, _, name = key.partition(".")
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, name, str(value))
    cfg = PipelineConfig()
    for sec in cp.sections():
        items = dict(cp.items(sec))
        if sec == "pipeline":
            cfg = _apply_section(cfg, items, sec)
        elif sec in _SECTIONS:
            sub = _apply_section(getattr(cfg, sec), items, sec)
            cfg = dataclasses.replace(cfg, **{sec: sub})
        else:
            raise ValueError(f"unknown config section [{sec}]")
    return cfg


# --------------------------------------------------------------------------
# queue

class QueueClosed(Exception):
    pass


class BoundedQueue:
    """FIFO bounded by the total size of its items.

    When full, ``put`` blocks, or with ``drop_oldest`` evicts from the head
    and counts what it threw away.
    """

    def __init__(self, capacity: int, drop_oldest: bool = False):
        self.capacity = capacity
        self.drop_oldest = drop_oldest
        self._items = deque()
        self._size = 0
        self._closed = False
        self._cv = threading.Condition()
        self.dropped_items = 0
        self.dropped_size = 0
        self.max_size = 0

    def put(self, item, size: int = 1):
        with self._cv:
            if self._closed:
                raise QueueClosed
            if self.drop_oldest:
                while self._items and self._size + size > self.capacity:
                    _, s = self._items.popleft()
                    self._size -= s
                    self.dropped_items += 1
                    self.dropped_size += s
            else:
                while self._items and self._size + size > self.capacity and not self._closed:
                    self._cv.wait()
            self._items.append((item, size))
            self._size += size
            self.max_size = max(self.max_size, self._size)
            self._cv.notify_all()

    def get(self, timeout: float | None = None):
        """Next item; raises :class:`QueueClosed` once closed and drained."""
        with self._cv:
            end = None if timeout is None else time.monotonic() + timeout
            while not self._items:
                if self._closed:
                    raise QueueClosed
                rem = None if end is None else end - time.monotonic()
                if rem is not None and rem <= 0:
                    raise TimeoutError
                self._cv.wait(rem)
            item, s = self._items.popleft()
            self._size -= s
            self._cv.notify_all()
            return item

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def __len__(self):
        with self._cv:
            return len(self._items)


# --------------------------------------------------------------------------
# registry

@dataclass(frozen=True)
class SpawnRequest:
    marker_id: int
    pose: Pose
    snapshot_seq: int
    snapshot_t: int
    ready_t: int = 0


class TrackerRegistry:
    """Active trackers by marker ID, plus IDs claimed by a pending spawn.

    ``pending`` maps an ID to the spawn request whose tracker will start from
    the batches buffered after that request's snapshot.
    """

    def __init__(self):
        self.active: dict[int, "TrackerHandle"] = {}
        self.pending: dict[int, SpawnRequest] = {}
        self._lock = threading.Lock()
        self.max_per_id = 0

    def claim(self, req: SpawnRequest) -> bool:
        with self._lock:
            if req.marker_id in self.active or req.marker_id in self.pending:
                return False
            self.pending[req.marker_id] = req
            return True

    def activate(self, handle: "TrackerHandle"):
        with self._lock:
            mid = handle.marker_id
            if mid in self.active:
                raise RuntimeError(f"marker {mid} already has an active tracker")
            self.pending.pop(mid, None)
            self.active[mid] = handle
            self.max_per_id = max(self.max_per_id, 1)

    def release(self, marker_id: int):
        with self._lock:
            self.pending.pop(marker_id, None)

    def deregister(self, marker_id: int, generation: int | None = None):
        """Remove the tracker; with ``generation`` only if it still matches."""
        with self._lock:
            h = self.active.get(marker_id)
            if h is None or (generation is not None and h.generation != generation):
                return None
            return self.active.pop(marker_id)

    def ids(self) -> set[int]:
        with self._lock:
            return set(self.active) | set(self.pending)

    def handles(self) -> list["TrackerHandle"]:
        with self._lock:
            return [self.active[k] for k in sorted(self.active)]


# --------------------------------------------------------------------------
# tracker handle

class TrackerHandle:
    """A tracker plus its window bookkeeping and output buffers."""

    def __init__(self, tracker, marker_id: int, generation: int, pose: Pose, window_updates: int,
                 start_t: int, record: bool = False):
        self.tracker = tracker
        self.marker_id = marker_id
        self.generation = generation
        self.windows = TrackingWindows(window_updates, pose, marker_id)
        self.samples: list[PoseSamples] = []
        self.emit_wall: list[np.ndarray] = []
        self.arrival_wall: list[np.ndarray] = []
        self.replayed_flags: list[np.ndarray] = []
        self.last_t = np.iinfo(np.int64).min
        self.last_update_t = start_t
        self.start_t = start_t
        self.consumed = 0
        self.replayed = 0
        self.record = record
        self.consumed_t: list[np.ndarray] = []
        self.fed_seq = -1  # last batch sequence number consumed

    def feed(self, batch: np.ndarray, arrival, replay: bool = False):
        """Run one batch. ``arrival`` is a scalar or per-event wall time."""
        samples, matched, uidx = self.tracker.process(batch, return_matched=True)
        done = time.perf_counter()
        self.consumed += len(batch)
        if replay:
            self.replayed += len(batch)
        if self.record:
            self.consumed_t.append(batch["t"].copy())
        windows = self.windows.feed(batch, samples, matched, uidx)
        if len(samples):
            t = samples.t
            # one sample per timestamp (the last), strictly after what was emitted
            keep = np.ones(len(t), dtype=bool)
            keep[:-1] = t[:-1] != t[1:]
            keep &= t > self.last_t
            if keep.any():
                s = PoseSamples(t[keep], samples.translation[keep], samples.rotation[keep], self.marker_id)
                self.samples.append(s)
                self.last_t = int(s.t[-1])
                arr = np.asarray(arrival, dtype=float)
                self.arrival_wall.append(arr[uidx[keep]] if arr.ndim else np.full(len(s), float(arr)))
                self.emit_wall.append(np.full(len(s), done))
                self.replayed_flags.append(np.full(len(s), replay))
            self.last_update_t = int(t[-1])
        return windows

    def pose_samples(self) -> PoseSamples:
        return PoseSamples.concatenate(self.samples, self.marker_id)


def _center_in_view(pose: Pose, intr: CameraIntrinsics) -> bool:
    z = pose.translation[2]
    if z <= 0:
        return False
    u = intr.fx * pose.translation[0] / z + intr.cx
    v = intr.fy * pose.translation[1] / z + intr.cy
    return bool(0 <= u < intr.width and 0 <= v < intr.height)


# --------------------------------------------------------------------------
# result

@dataclass
class PipelineResult:
    poses: dict
    reports: list
    metrics: dict
    spawns: list
    deregistrations: list
    latency_s: np.ndarray = field(default_factory=lambda: np.empty(0))
    latency_replayed: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))
    latency_first_s: float = math.nan
    consumed: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# engine

def _batches(source, batch_size):
    if source is None:
        return
    if isinstance(source, (str, Path)):
        source = read_events(source)
    if isinstance(source, np.ndarray):
        for s in range(0, len(source), batch_size):
            yield source[s:s + batch_size]
        return
    for chunk in source:
        chunk = np.asarray(chunk)
        for s in range(0, len(chunk), batch_size):
            yield chunk[s:s + batch_size]


class _Engine:
    """State and stage logic shared by the threaded and single-context runs."""

    def __init__(self, intrinsics, cfg: PipelineConfig, dictionary, tracker_factory, pace):
        self.intr = intrinsics
        self.cfg = cfg
        self.dictionary = dictionary or default_dictionary()
        self.tracker_factory = tracker_factory or (
            lambda model, intr, pose, tcfg: Tracker(model, intr, pose, tcfg))
        self.pace = pace
        self.filter = NoiseFilter(intrinsics.width, intrinsics.height, cfg.filter)
        self.frame = EventFrame(intrinsics.width, intrinsics.height)
        self.frame_seq = -1
        self.registry = TrackerRegistry()
        self.history: deque = deque()  # (seq, events, arrival)
        self.reports: list[BacktrackReport] = []
        self.spawns: list[dict] = []
        self.deregs: list[dict] = []
        self.finished: list[TrackerHandle] = []
        self.generation = 0
        self.counts = dict(read=0, filtered_out=0, kept=0, batches=0, detector_passes=0,
                           detections=0, windows=0)
        self.t_first = None
        self.t_last = None
        self.batch_times = []  # (arrival, dequeue, done)
        self._lock = threading.Lock()
        self._wall0 = None

    # -- stage 1
    def ingest(self, seq, batch):
        """Filter one batch and paint the frame. Returns (kept, arrival)."""
        if self._wall0 is None:
            self._wall0 = time.perf_counter()
        if self.t_first is None and len(batch):
            self.t_first = int(batch["t"][0])
        arrival = self._arrival(batch)
        self.counts["read"] += len(batch)
        if self.cfg.filter_enabled:
            kept = batch[self.filter.mask(batch)]
        else:
            kept = np.array(batch, dtype=EVENT_DTYPE)
        kept.flags.writeable = False
        self.counts["kept"] += len(kept)
        self.counts["filtered_out"] += len(batch) - len(kept)
        with self._lock:
            self.frame.apply(kept)
            self.frame_seq = seq
            if len(batch):
                self.t_last = int(batch["t"][-1])
        return kept, arrival

    def _arrival(self, batch):
        if self.pace is None or len(batch) == 0:
            return time.perf_counter()
        # synthetic arrival clock: event time scaled by the pacing factor
        t0, w0 = self._pace_origin(batch)
        due = w0 + (int(batch["t"][-1]) - t0) * 1e-6 / self.pace
        while True:
            now = time.perf_counter()
            if now >= due:
                break
            time.sleep(min(due - now, 0.002))
        return w0 + (batch["t"] - t0).astype(float) * 1e-6 / self.pace

    def _pace_origin(self, batch):
        if not hasattr(self, "_origin"):
            self._origin = (int(batch["t"][0]), time.perf_counter())
        return self._origin

    # -- stage 2
    def detect(self, snapshot, seq, ready_t=0) -> list[SpawnRequest]:
        self.counts["detector_passes"] += 1
        found = detect_markers(snapshot, self.dictionary, self.intr, self.cfg.detector,
                               exclude_ids=self.registry.ids())
        out = []
        for d in found:
            req = SpawnRequest(d.id, d.pose, seq, snapshot.timestamp, ready_t)
            if self.registry.claim(req):
                out.append(req)
                self.counts["detections"] += 1
        return out

    # -- stage 3
    def remember(self, seq, kept, arrival):
        self.history.append((seq, kept, arrival))
        if len(kept):
            horizon = int(kept["t"][-1]) - self.cfg.history
            while len(self.history) > 1 and (len(self.history[0][1]) == 0
                                              or int(self.history[0][1]["t"][-1]) < horizon):
                self.history.popleft()

    def spawn(self, req: SpawnRequest, now_t: int):
        """Start a tracker and replay the batches after its snapshot."""
        model = self.dictionary.model(req.marker_id, self.cfg.detector.side(req.marker_id))
        self.generation += 1
        tr = self.tracker_factory(model, self.intr, req.pose, self.cfg.tracker)
        h = TrackerHandle(tr, req.marker_id, self.generation, req.pose,
                          self.cfg.backtrack.window_updates, req.snapshot_t, self.cfg.record_consumed)
        windows = []
        h.fed_seq = req.snapshot_seq
        for seq, ev, arr in self.history:
            if seq > req.snapshot_seq and len(ev):
                windows += h.feed(ev, arr, replay=True)
                h.fed_seq = seq
        self.registry.activate(h)
        self.spawns.append(dict(marker_id=req.marker_id, generation=h.generation,
                                snapshot_seq=req.snapshot_seq, snapshot_t=req.snapshot_t, spawn_t=now_t,
                                replayed_events=h.replayed))
        return h, windows

    def track(self, handles, seq, kept, arrival, pool=None):
        """Feed batch ``seq`` to every active tracker that has not seen it yet;
        returns completed windows."""
        handles = [h for h in handles if h.fed_seq < seq]
        for h in handles:
            h.fed_seq = seq
        if not len(kept) or not handles:
            return []
        if pool is not None and len(handles) > 1:
            results = list(pool.map(lambda h: h.feed(kept, arrival), handles))
        else:
            results = [h.feed(kept, arrival) for h in handles]
        return [w for ws in results for w in ws]

    def housekeeping(self, now_t) -> list[tuple]:
        """Trackers to drop for geometric reasons or inactivity."""
        out = []
        for h in self.registry.handles():
            if h.tracker.lost_geometry:
                out.append((h, "behind_camera"))
            elif self.cfg.check_view and not _center_in_view(h.tracker.pose, self.intr):
                out.append((h, "out_of_view"))
            elif now_t - h.last_update_t > self.cfg.stale_timeout:
                out.append((h, "stale"))
        return out

    # -- stage 4
    def verify(self, w, handle_model):
        rep = backtrack_window(w.pose_start, w.pose_forward, w.events, handle_model, self.intr,
                               self.cfg.tracker, self.cfg.backtrack, w.index, w.marker_id)
        self.counts["windows"] += 1
        return rep

    def drop(self, marker_id, generation, reason, t):
        h = self.registry.deregister(marker_id, generation)
        if h is None:
            return False
        self.finished.append(h)
        self.deregs.append(dict(marker_id=marker_id, generation=generation, reason=reason, t=int(t)))
        return True

    # -- results
    def result(self, wall):
        handles = self.finished + self.registry.handles()
        poses = {}
        for h in sorted(handles, key=lambda h: h.generation):
            poses.setdefault(h.marker_id, []).append(h.pose_samples())
        poses = {k: PoseSamples.concatenate(v, k) for k, v in sorted(poses.items())}
        emit = [np.concatenate(h.emit_wall) for h in handles if h.emit_wall]
        arr = [np.concatenate(h.arrival_wall) for h in handles if h.arrival_wall]
        rep = [np.concatenate(h.replayed_flags) for h in handles if h.replayed_flags]
        lat = np.concatenate(emit) - np.concatenate(arr) if emit else np.empty(0)
        replayed = np.concatenate(rep) if rep else np.empty(0, dtype=bool)
        first = math.nan
        if emit:
            firsts = [(h.emit_wall[0][0], h.emit_wall[0][0] - h.arrival_wall[0][0])
                      for h in handles if h.emit_wall]
            first = float(min(firsts)[1])
        matched = sum(int(h.tracker.state.matched) for h in handles if hasattr(h.tracker, "state"))
        discarded = sum(int(h.tracker.state.discarded) for h in handles if hasattr(h.tracker, "state"))
        per_tracker = [dict(marker_id=h.marker_id, generation=h.generation,
                            updates=int(sum(len(s) for s in h.samples)),
                            consumed=h.consumed, replayed=h.replayed)
                       for h in sorted(handles, key=lambda h: h.generation)]
        steady = lat[~replayed] if len(lat) else lat
        metrics = dict(
            events=dict(read=self.counts["read"], filtered_out=self.counts["filtered_out"],
                        kept=self.counts["kept"], matched=matched, discarded=discarded),
            trackers=per_tracker,
            spawns=self.spawns,
            deregistrations=self.deregs,
            detector_passes=self.counts["detector_passes"],
            windows_verified=self.counts["windows"],
            lost_windows=int(sum(r.lost for r in self.reports)),
            throughput=dict(wall_s=wall, events_per_s=self.counts["read"] / wall if wall > 0 else 0.0),
            latency_ms=_stats_ms(lat, steady, first),
        )
        consumed = {h.generation: np.concatenate(h.consumed_t) if h.consumed_t else np.empty(0, np.int64)
                    for h in handles} if self.cfg.record_consumed else {}
        return PipelineResult(poses, list(self.reports), metrics, list(self.spawns), list(self.deregs),
                              lat, replayed, first, consumed)


def _stats_ms(lat, steady, first):
    if len(lat) == 0:
        return dict(n=0)
    s = steady if len(steady) else lat
    return dict(n=int(len(lat)), mean=float(1e3 * s.mean()), std=float(1e3 * s.std()),
                p99=float(1e3 * np.percentile(s, 99)), first=float(1e3 * first),
                all_mean=float(1e3 * lat.mean()))


def _model_of(engine, marker_id):
    return engine.dictionary.model(marker_id, engine.cfg.detector.side(marker_id))


def _run_single(engine: _Engine, source):
    cfg = engine.cfg
    next_detect = None
    pending: list[SpawnRequest] = []
    for seq, batch in enumerate(_batches(source, cfg.batch_size)):
        if len(batch) == 0:
            continue
        t_arr = time.perf_counter()
        kept, arrival = engine.ingest(seq, batch)
        engine.remember(seq, kept, arrival)
        now_t = int(batch["t"][-1])
        windows = engine.track(engine.registry.handles(), seq, kept, arrival)
        engine.batch_times.append((t_arr, t_arr, time.perf_counter()))
        # spawns whose simulated detector latency has elapsed
        still = []
        for req in pending:
            if req.ready_t <= now_t:
                _, ws = engine.spawn(req, now_t)
                windows += ws
            else:
                still.append(req)
        pending = still
        if next_detect is None:
            next_detect = int(batch["t"][0]) + cfg.detector_period
        if now_t >= next_detect:
            snap = engine.frame.snapshot(cfg.frame_max_age)
            for req in engine.detect(snap, seq, now_t + cfg.detection_delay):
                if cfg.detection_delay == 0:
                    _, ws = engine.spawn(req, now_t)
                    windows += ws
                else:
                    pending.append(req)
            while next_detect <= now_t:
                next_detect += cfg.detector_period
        lost = {}
        if cfg.verify:
            for w in windows:
                rep = engine.verify(w, _model_of(engine, w.marker_id))
                engine.reports.append(rep)
                if rep.lost and w.marker_id not in lost:
                    lost[w.marker_id] = rep.window_end_t
        for h in engine.registry.handles():
            if h.marker_id in lost:
                engine.drop(h.marker_id, h.generation, "lost", lost[h.marker_id])
        for h, reason in engine.housekeeping(now_t):
            engine.drop(h.marker_id, h.generation, reason, now_t)
    for req in pending:
        engine.registry.release(req.marker_id)


def _run_threaded(engine: _Engine, source):
    cfg = engine.cfg
    q_track = BoundedQueue(cfg.queue_capacity, drop_oldest=cfg.live)
    q_verify = BoundedQueue(1 << 30)
    control: deque = deque()  # spawn / deregister requests for the tracker stage
    cv = threading.Condition()
    state = dict(done=False, t=None)
    errors = []

    def guard(fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # surfaced after join
                errors.append(exc)
                q_track.close()
                q_verify.close()
                with cv:
                    state["done"] = True
                    cv.notify_all()
        return run

    @guard
    def ingest():
        try:
            for seq, batch in enumerate(_batches(source, cfg.batch_size)):
                if len(batch) == 0:
                    continue
                kept, arrival = engine.ingest(seq, batch)
                q_track.put((seq, kept, arrival, time.perf_counter()), max(1, len(kept)))
                with cv:
                    state["t"] = int(batch["t"][-1])
                    cv.notify_all()
        finally:
            q_track.close()
            with cv:
                state["done"] = True
                cv.notify_all()

    @guard
    def detector():
        next_detect = None
        while True:
            with cv:
                while not state["done"] and (state["t"] is None or
                                             (next_detect is not None and state["t"] < next_detect)):
                    cv.wait()
                if state["done"]:
                    return
                t = state["t"]
            if next_detect is None:
                next_detect = engine.t_first + cfg.detector_period
                if t < next_detect:
                    continue
            with engine._lock:
                seq = engine.frame_seq
                snap = engine.frame.snapshot(cfg.frame_max_age)
            for req in engine.detect(snap, seq):
                control.append(("spawn", req))
            while next_detect <= t:
                next_detect += cfg.detector_period

    @guard
    def verifier():
        while True:
            try:
                w = q_verify.get()
            except QueueClosed:
                return
            rep = engine.verify(w, _model_of(engine, w.marker_id))
            engine.reports.append(rep)
            if rep.lost:
                control.append(("drop", w.marker_id, w.generation, "lost", rep.window_end_t))

    def drain(now_t):
        windows = []
        while control:
            msg = control.popleft()
            if msg[0] == "spawn":
                _, ws = engine.spawn(msg[1], now_t)
                windows += ws
            else:
                _, mid, gen, reason, t = msg
                engine.drop(mid, gen, reason, t)
        return windows

    def push(windows):
        for w in windows:
            h = engine.registry.active.get(w.marker_id)
            gen = h.generation if h is not None else -1
            if cfg.verify:
                q_verify.put(_Tagged(w, gen))

    threads = [threading.Thread(target=f, name=n, daemon=True)
               for f, n in ((ingest, "ingest"), (detector, "detector"), (verifier, "verify"))]
    for th in threads:
        th.start()
    with ThreadPoolExecutor(max_workers=8, thread_name_prefix="tracker") as pool:
        now_t = 0
        while True:
            try:
                seq, kept, arrival, t_in = q_track.get()
            except QueueClosed:
                break
            t_deq = time.perf_counter()
            if len(kept):
                now_t = int(kept["t"][-1])
            engine.remember(seq, kept, arrival)
            push(drain(now_t))
            push(engine.track(engine.registry.handles(), seq, kept, arrival, pool))
            engine.batch_times.append((float(np.max(arrival)), t_deq, time.perf_counter()))
            for h, reason in engine.housekeeping(now_t):
                engine.drop(h.marker_id, h.generation, reason, now_t)
        q_verify.close()
        threads[2].join()
        drain(now_t)  # late deregistrations
        for req in [m[1] for m in control if m[0] == "spawn"]:
            engine.registry.release(req.marker_id)
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    engine.q_stats = dict(track_max_events=q_track.max_size, dropped_batches=q_track.dropped_items,
                          dropped_events=q_track.dropped_size)


class _Tagged:
    """A window plus the generation of the tracker that produced it."""

    __slots__ = ("w", "generation")

    def __init__(self, w, generation):
        self.w = w
        self.generation = generation

    def __getattr__(self, name):
        return getattr(self.w, name)


def run_pipeline(source, intrinsics: CameraIntrinsics, cfg: PipelineConfig | None = None,
                 dictionary: MarkerDictionary | None = None, tracker_factory=None,
                 pace: float | None = None) -> PipelineResult:
    """Run the full pipeline over ``source``.

    ``source`` is an event array, an event file path or an iterable of event
    arrays. ``pace`` replays the stream against a wall clock (1.0 is real
    time), which gives every event an arrival time for latency figures.
    """
    cfg = cfg or PipelineConfig()
    engine = _Engine(intrinsics, cfg, dictionary, tracker_factory, pace)
    engine.q_stats = dict(track_max_events=0, dropped_batches=0, dropped_events=0)
    t0 = time.perf_counter()
    if cfg.concurrent:
        _run_threaded(engine, source)
    else:
        _run_single(engine, source)
    res = engine.result(time.perf_counter() - t0)
    res.metrics["queue"] = engine.q_stats
    res.metrics["batch_times"] = len(engine.batch_times)
    res.batch_times = np.array(engine.batch_times).reshape(-1, 3)
    return res


def write_outputs(result: PipelineResult, out_dir) -> dict:
    """Pose CSVs (combined and per marker), backtrack CSV and metrics JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    rows = []
    for mid, s in result.poses.items():
        p = out / f"poses_{mid}.csv"
        write_poses(s, p)
        paths[f"poses_{mid}"] = p
        rows.append(s)
    comb = out / "poses.csv"
    with open(comb, "w") as fh:
        fh.write("t_us,marker_id,tx,ty,tz," + ",".join(f"r{i}{j}" for i in (1, 2, 3) for j in (1, 2, 3)) + "\n")
        for s in rows:
            for k in range(len(s)):
                vals = [*s.translation[k], *s.rotation[k].ravel()]
                fh.write(f"{s.t[k]},{s.marker_id}," + ",".join(f"{v:.12g}" for v in vals) + "\n")
    paths["poses"] = comb
    bt = out / "backtrack.csv"
    write_reports(result.reports, bt)
    paths["backtrack"] = bt
    mj = out / "metrics.json"
    mj.write_text(json.dumps(result.metrics, indent=2, default=_json_default))
    paths["metrics"] = mj
    return paths


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# --------------------------------------------------------------------------
# benchmarks

@dataclass
class BenchRow:
    n: int
    wall_s: float
    events: int
    updates: int
    event_span_s: float
    mev_per_s: float
    update_rate_hz: float
    realtime: bool
    matched_frac: float
    event_s: np.ndarray
    output_s: np.ndarray


@dataclass
class BenchReport:
    rows: list
    max_realtime_update_rate_hz: float
    crossover_n: int | None

    def table(self) -> str:
        lines = [f"{'n':>5} {'wall s':>8} {'MEv/s':>7} {'updates':>9} {'rate kHz':>9} {'matched':>7} realtime"]
        for r in self.rows:
            lines.append(f"{r.n:>5} {r.wall_s:8.3f} {r.mev_per_s:7.2f} {r.updates:9d} "
                         f"{r.update_rate_hz / 1e3:9.1f} {r.matched_frac:7.3f} {'yes' if r.realtime else 'no'}")
        lines.append(f"max real-time update rate: {self.max_realtime_update_rate_hz / 1e3:.1f} kHz"
                     + (f" (smallest real-time n = {self.crossover_n})" if self.crossover_n else ""))
        return "\n".join(lines)


def bench_throughput(events: np.ndarray, model: MarkerModel, intrinsics: CameraIntrinsics,
                     pose: Pose, rates=(1, 5, 10, 50, 100, 500), cfg: TrackerConfig | None = None,
                     repeats: int = 3, chunk: int = 1 << 16, gain_ref: int | None = 100) -> BenchReport:
    """Time the tracker hot path over the same recorded stream for each ``n``.

    Every run replays ``events`` from the same start pose. ``event_s`` and
    ``output_s`` trace event time against wall time at chunk boundaries; a run
    is real-time when its wall clock never falls behind the event clock.
    Each ``n`` keeps the fastest of ``repeats`` runs.

    The accumulators decay slowly, so each update re-applies most of the last
    correction. With ``n`` below ``gain_ref`` the step sizes are scaled by
    ``n / gain_ref`` to keep the gain per event constant; at the default
    steps a tracker with n < 10 overshoots, leaves the marker and then runs
    fast only because nothing matches. ``gain_ref=None`` keeps ``cfg`` as is.
    ``matched_frac`` shows whether a run stayed on the marker.
    """
    cfg = cfg or TrackerConfig()
    t0 = int(events["t"][0])
    span = (int(events["t"][-1]) - t0) * 1e-6
    bounds = list(range(0, len(events), chunk)) + [len(events)]
    # warm the jit once
    Tracker(model, intrinsics, pose, cfg).process(events[:1000])
    cfgs = []
    for n in rates:
        c = dataclasses.replace(cfg, update_every_n=int(n))
        if gain_ref and n < gain_ref:
            k = n / gain_ref
            c = dataclasses.replace(c, lambda_t=cfg.lambda_t * k, lambda_r=cfg.lambda_r * k)
        cfgs.append(c)
    best = [None] * len(rates)
    # round-robin over n so slow drift in machine load hits every n alike
    for _ in range(repeats):
        for j, c in enumerate(cfgs):
            tr = Tracker(model, intrinsics, pose, c)
            ev_s = np.empty(len(bounds) - 1)
            out_s = np.empty(len(bounds) - 1)
            w0 = time.perf_counter()
            for i in range(len(bounds) - 1):
                tr.process(events[bounds[i]:bounds[i + 1]])
                out_s[i] = time.perf_counter() - w0
                ev_s[i] = (int(events["t"][bounds[i + 1] - 1]) - t0) * 1e-6
            wall = out_s[-1]
            if best[j] is None or wall < best[j][0]:
                best[j] = (wall, tr.state.updates_done, tr.state.matched / len(events), ev_s, out_s)
    rows = []
    for n, (wall, upd, frac, ev_s, out_s) in zip(rates, best):
        rt = bool(np.all(out_s <= ev_s + 1e-3))
        rows.append(BenchRow(int(n), wall, len(events), int(upd), span, len(events) / wall / 1e6,
                             upd / span if span > 0 else 0.0, rt, frac, ev_s, out_s))
    ok = [r for r in rows if r.realtime]
    best_rate = max((r.update_rate_hz for r in ok), default=0.0)
    cross = min((r.n for r in ok), default=None)
    return BenchReport(rows, best_rate, cross)


@dataclass
class LatencyReport:
    mean_ms: float
    std_ms: float
    p99_ms: float
    first_ms: float
    n: int
    latencies_ms: np.ndarray
    replayed: np.ndarray
    event_rate: float

    def summary(self) -> dict:
        return dict(mean_ms=self.mean_ms, std_ms=self.std_ms, p99_ms=self.p99_ms,
                    first_ms=self.first_ms, n=self.n, event_rate_mev_s=self.event_rate / 1e6)


def measure_latency(events: np.ndarray, intrinsics: CameraIntrinsics, cfg: PipelineConfig | None = None,
                    event_rate: float = 1e6, dictionary=None, tracker_factory=None) -> LatencyReport:
    """Replay ``events`` through the threaded pipeline at ``event_rate`` ev/s.

    Each event gets a synthetic wall-clock arrival time; a pose sample's
    latency is its emission time minus the arrival of the event that
    triggered it. Steady-state figures exclude samples produced while a new
    tracker replays its buffered events; ``first_ms`` is the first sample.
    """
    cfg = cfg or PipelineConfig(batch_size=1024)
    cfg = dataclasses.replace(cfg, concurrent=True)
    span = (int(events["t"][-1]) - int(events["t"][0])) * 1e-6
    native = len(events) / span if span > 0 else event_rate
    res = run_pipeline(events, intrinsics, cfg, dictionary, tracker_factory, pace=event_rate / native)
    lat = res.latency_s * 1e3
    steady = lat[~res.latency_replayed] if len(lat) else lat
    if len(steady) == 0:
        steady = lat
    if len(lat) == 0:
        return LatencyReport(math.nan, math.nan, math.nan, math.nan, 0, lat, res.latency_replayed, event_rate)
    return LatencyReport(float(steady.mean()), float(steady.std()), float(np.percentile(steady, 99)),
                         float(res.latency_first_s * 1e3), int(len(lat)), lat, res.latency_replayed,
                         event_rate)
