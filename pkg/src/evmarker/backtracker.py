"""Two-way verification of a tracker.

After every ``window_updates`` pose updates the events that drove them are
replayed in reverse through a fresh tracker seeded at the forward result. A
healthy tracker retraces its path back to where the window started; a lost one
does not. The gap is scored in projected pixels (marker centre, L1) and in
summed Euler angle differences.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .events import EVENT_DTYPE
from .core import BehindCameraError, CameraIntrinsics, MarkerModel, Pose, project_point
from .tracker import PoseSamples, Tracker, TrackerConfig

__all__ = [
    "BacktrackConfig",
    "BacktrackReport",
    "WindowRecord",
    "TrackingWindows",
    "backtrack_window",
    "translation_discrepancy",
    "rotation_discrepancy",
    "euler_zyx",
    "is_lost",
    "write_reports",
]


@dataclass(frozen=True)
class BacktrackConfig:
    """Verification settings.

    ``compare`` picks what the backward pose is scored against: ``"start"``
    (the pose at the start of the window, default) or ``"forward"`` (the
    forward result the replay was seeded with).
    """

    window_updates: int = 100
    eps_t: float = 5.0
    eps_r: float = 0.15
    warmup_windows: int = 1
    compare: str = "start"

    def __post_init__(self):
        if self.window_updates < 1:
            raise ValueError("window_updates must be >= 1")
        if self.eps_t <= 0 or self.eps_r <= 0:
            raise ValueError("thresholds must be positive")
        if self.warmup_windows < 0:
            raise ValueError("warmup_windows must be >= 0")
        if self.compare not in ("start", "forward"):
            raise ValueError(f"unknown compare mode {self.compare!r}")


@dataclass(frozen=True)
class BacktrackReport:
    window_start_t: int
    window_end_t: int
    pose_start: Pose
    pose_forward: Pose
    pose_backward: Pose
    d_t: float
    d_r: float
    lost: bool
    window_index: int = 0
    marker_id: int = -1
    n_events: int = 0


def is_lost(d_t: float, d_r: float, cfg: BacktrackConfig, window_index: int = 0) -> bool:
    """Lost flag; windows inside the warm-up are never flagged."""
    if window_index < cfg.warmup_windows:
        return False
    return bool(d_t > cfg.eps_t or d_r > cfg.eps_r)


def translation_discrepancy(pose_a: Pose, pose_b: Pose, model: MarkerModel | None,
                            intrinsics: CameraIntrinsics) -> float:
    """L1 pixel distance between the projected marker centres under two poses.

    Raises :class:`BehindCameraError` if either centre has non-positive depth.
    """
    c = np.zeros(3)
    a = project_point(pose_a, intrinsics, c)
    b = project_point(pose_b, intrinsics, c)
    return float(abs(a[0] - b[0]) + abs(a[1] - b[1]))


def euler_zyx(R) -> tuple[float, float, float]:
    """Intrinsic Z-Y-X angles ``(heading, pitch, roll)`` with R = Rz Ry Rx.

    At gimbal lock (|pitch| = pi/2) roll is set to 0 and the remaining freedom
    goes into heading.
    """
    R = np.asarray(R, dtype=float)
    s = -R[2, 0]
    s = max(-1.0, min(1.0, s))
    pitch = math.asin(s)
    if abs(s) < 1.0 - 1e-12:
        heading = math.atan2(R[1, 0], R[0, 0])
        roll = math.atan2(R[2, 1], R[2, 2])
    else:
        roll = 0.0
        heading = math.atan2(-R[0, 1], R[1, 1])
    return heading, pitch, roll


def _wrap(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


def rotation_discrepancy(pose_a: Pose, pose_b: Pose) -> float:
    """Sum of absolute wrapped differences of the Z-Y-X Euler angles."""
    ea = euler_zyx(pose_a.rotation)
    eb = euler_zyx(pose_b.rotation)
    return float(sum(abs(_wrap(x - y)) for x, y in zip(ea, eb)))


def backtrack_window(pose_start: Pose, pose_forward: Pose, events: np.ndarray,
                     model: MarkerModel, intrinsics: CameraIntrinsics,
                     cfg_tracker: TrackerConfig | None = None,
                     cfg_bt: BacktrackConfig | None = None,
                     window_index: int = 0, marker_id: int | None = None) -> BacktrackReport:
    """Replay ``events`` (forward order) backwards from ``pose_forward``.

    The replay uses a fresh tracker, so the live forward tracker is never
    touched. A centre that ends up behind the camera scores ``inf``.
    """
    cfg_tracker = cfg_tracker or TrackerConfig()
    cfg_bt = cfg_bt or BacktrackConfig()
    mid = model.id if marker_id is None else marker_id
    if len(events) == 0:
        return BacktrackReport(0, 0, pose_start, pose_forward, pose_forward, 0.0, 0.0, False,
                               window_index, mid, 0)
    tr = Tracker(model, intrinsics, pose_forward, cfg_tracker)
    tr.process(events[::-1])
    back = tr.pose
    ref = pose_start if cfg_bt.compare == "start" else pose_forward
    try:
        d_t = translation_discrepancy(ref, back, model, intrinsics)
    except BehindCameraError:
        d_t = math.inf
    d_r = rotation_discrepancy(ref, back)
    return BacktrackReport(int(events["t"][0]), int(events["t"][-1]), pose_start, pose_forward,
                           back, d_t, d_r, is_lost(d_t, d_r, cfg_bt, window_index),
                           window_index, mid, len(events))


@dataclass(frozen=True)
class WindowRecord:
    """Immutable snapshot of one completed verification window."""

    index: int
    marker_id: int
    pose_start: Pose
    pose_forward: Pose
    events: np.ndarray


@dataclass
class TrackingWindows:
    """Cuts a tracker's matched events into windows of ``k`` updates.

    Feed it the output of ``Tracker.process(batch, return_matched=True)``
    together with the batch; it returns the windows completed by that batch.
    """

    k: int
    pose_start: Pose
    marker_id: int = -1
    index: int = 0
    _chunks: list = field(default_factory=list)
    _updates: int = 0

    def feed(self, batch: np.ndarray, samples: PoseSamples, matched: np.ndarray,
             update_index: np.ndarray) -> list[WindowRecord]:
        done = []
        cut = 0
        for j, u in enumerate(update_index):
            self._updates += 1
            if self._updates < self.k:
                continue
            seg = batch[cut:u + 1]
            self._chunks.append(seg[matched[cut:u + 1]])
            ev = np.concatenate(self._chunks) if len(self._chunks) > 1 else self._chunks[0].copy()
            fwd = samples.pose(j)
            done.append(WindowRecord(self.index, self.marker_id, self.pose_start, fwd, ev))
            self.index += 1
            self.pose_start = fwd
            self._chunks = []
            self._updates = 0
            cut = u + 1
        if cut < len(batch):
            seg = batch[cut:]
            m = matched[cut:]
            if m.any():
                self._chunks.append(seg[m])
        return done

    def pending_events(self) -> np.ndarray:
        """Matched events of the window still in progress."""
        if not self._chunks:
            return np.empty(0, dtype=EVENT_DTYPE)
        return np.concatenate(self._chunks)


def write_reports(reports, path) -> None:
    """Report CSV: ``window_end_t_us,marker_id,d_t_px,d_r_rad,lost``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_end_t_us", "marker_id", "d_t_px", "d_r_rad", "lost"])
        for r in reports:
            w.writerow([r.window_end_t, r.marker_id, repr(float(r.d_t)), repr(float(r.d_r)), int(r.lost)])
