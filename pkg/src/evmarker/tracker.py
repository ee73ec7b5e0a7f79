"""Event-by-event 6-DOF marker tracking.

Every event is matched to the closest projected marker edge; the 3-D closest
points between its line of sight and that edge feed exponentially blended
accumulators, and every ``update_every_n`` matched events the pose is moved
by a translation solve and a torque-driven rotation step.

The per-event math lives in small jitted helpers that both the single-event
API (:func:`match_event`, :func:`accumulate`, :func:`apply_update`) and the
batch kernel behind :class:`Tracker` call, so the two paths agree exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .core import CameraIntrinsics, MarkerModel, Pose, reorthonormalize
from .events import EVENT_DTYPE, _as_events

__all__ = [
    "TrackerConfig",
    "TrackerState",
    "MatchResult",
    "PoseSamples",
    "Tracker",
    "match_event",
    "accumulate",
    "apply_update",
    "process_events",
]

# counter slots in TrackerState.counters
SINCE, UPDATES, DISCARDED, LAST_T, ROT_SINCE_ORTHO, MATCHED, SKIPPED, STATUS = range(8)
N_COUNTERS = 8

STATUS_OK = 0
STATUS_BEHIND_CAMERA = 1


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker hyper-parameters.

    ``torque_units`` selects how a per-event torque is scaled before blending:
    ``"pixel"`` measures the residual force in pixels at the point's depth and
    the lever arm in marker half-sides, which keeps ``lambda_r`` meaningful
    across marker sizes and distances; ``"metric"`` uses raw meters.
    ``torque_lever`` picks the lever arm: ``"marker"`` (from the marker
    centre, i.e. the rotation pivot) or ``"camera"`` (from the optical centre).

    ``max_step_px`` caps one translation step so that no projected corner
    moves further than that many pixels. Depth is nearly unobservable for a
    small fronto-parallel marker, A's smallest eigenvalue can drop to 1e-4
    and a single noisy update would otherwise jump several millimetres.
    ``None`` turns the cap off.
    """

    w0: float = 0.1
    lambda_t: float = 1.4
    lambda_r: float = 0.003
    update_every_n: int = 100
    match_threshold: float = 2.0
    count_unmatched: bool = False
    torque_units: str = "pixel"
    torque_lever: str = "marker"
    condition_limit: float = 1e8
    reorthonormalize_every: int = 1000
    max_step_px: float | None = 1.0

    def __post_init__(self):
        if not 0 < self.w0 <= 1:
            raise ValueError("w0 must be in (0, 1]")
        if self.lambda_t <= 0 or self.lambda_r <= 0:
            raise ValueError("gains must be positive")
        if self.update_every_n < 1:
            raise ValueError("update_every_n must be >= 1")
        if self.match_threshold <= 0:
            raise ValueError("match_threshold must be positive")
        if self.max_step_px is not None and self.max_step_px <= 0:
            raise ValueError("max_step_px must be positive or None")
        if self.torque_units not in ("pixel", "metric"):
            raise ValueError(f"unknown torque_units {self.torque_units!r}")
        if self.torque_lever not in ("marker", "camera"):
            raise ValueError(f"unknown torque_lever {self.torque_lever!r}")


@dataclass
class TrackerState:
    rotation: np.ndarray
    translation: np.ndarray
    acc_a: np.ndarray = field(default_factory=lambda: np.eye(3))
    acc_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acc_torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    counters: np.ndarray = field(default_factory=lambda: np.zeros(N_COUNTERS, dtype=np.int64))

    @classmethod
    def initial(cls, pose: Pose) -> "TrackerState":
        """Fresh state at ``pose``: A = I, B = 0, torque = 0."""
        return cls(np.array(pose.rotation, dtype=float), np.array(pose.translation, dtype=float))

    def copy(self) -> "TrackerState":
        return TrackerState(self.rotation.copy(), self.translation.copy(), self.acc_a.copy(),
                            self.acc_b.copy(), self.acc_torque.copy(), self.counters.copy())

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.translation)

    events_since_update = property(lambda self: int(self.counters[SINCE]))
    updates_done = property(lambda self: int(self.counters[UPDATES]))
    discarded = property(lambda self: int(self.counters[DISCARDED]))
    matched = property(lambda self: int(self.counters[MATCHED]))
    skipped_updates = property(lambda self: int(self.counters[SKIPPED]))
    last_event_t = property(lambda self: int(self.counters[LAST_T]))
    status = property(lambda self: int(self.counters[STATUS]))


@dataclass(frozen=True)
class MatchResult:
    segment_index: int
    distance: float
    alpha1: float
    alpha2: float
    f_point: np.ndarray
    e_point: np.ndarray
    direction: np.ndarray
    torque_gain: float


@dataclass
class PoseSamples:
    """Timestamped poses emitted by a tracker, one per applied update."""

    t: np.ndarray
    translation: np.ndarray
    rotation: np.ndarray
    marker_id: int = -1

    @classmethod
    def empty(cls, marker_id=-1) -> "PoseSamples":
        return cls(np.empty(0, np.int64), np.empty((0, 3)), np.empty((0, 3, 3)), marker_id)

    def __len__(self):
        return len(self.t)

    def pose(self, i) -> Pose:
        return Pose(self.rotation[i], self.translation[i])

    @classmethod
    def concatenate(cls, parts, marker_id=None) -> "PoseSamples":
        parts = [p for p in parts if len(p)]
        if marker_id is None:
            marker_id = parts[0].marker_id if parts else -1
        if not parts:
            return cls.empty(marker_id)
        return cls(np.concatenate([p.t for p in parts]),
                   np.concatenate([p.translation for p in parts]),
                   np.concatenate([p.rotation for p in parts]), marker_id)


# --------------------------------------------------------------------------
# jitted helpers

@numba.njit(cache=True, inline="always")
def _exp_rot(rx, ry, rz, out):
    th2 = rx * rx + ry * ry + rz * rz
    th = math.sqrt(th2)
    if th < 1e-12:
        a = 0.0
        b = 0.0
    elif th < 1e-8:
        a = 1.0
        b = 0.5
    else:
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / th2
    # I + a K + b K^2 with K = [r]x
    out[0, 0] = 1.0 - b * (ry * ry + rz * rz)
    out[1, 1] = 1.0 - b * (rx * rx + rz * rz)
    out[2, 2] = 1.0 - b * (rx * rx + ry * ry)
    out[0, 1] = -a * rz + b * rx * ry
    out[1, 0] = a * rz + b * rx * ry
    out[0, 2] = a * ry + b * rx * rz
    out[2, 0] = -a * ry + b * rx * rz
    out[1, 2] = -a * rx + b * ry * rz
    out[2, 1] = a * rx + b * ry * rz


@numba.njit(cache=True)
def _project_vertices(R, T, verts, fx, fy, cx, cy, vc, v2, bbox, margin):
    """Camera-frame vertices, their pixels and the dilated pixel bounding box."""
    ok = True
    for i in range(verts.shape[0]):
        for r in range(3):
            vc[i, r] = R[r, 0] * verts[i, 0] + R[r, 1] * verts[i, 1] + R[r, 2] * verts[i, 2] + T[r]
        z = vc[i, 2]
        if z <= 0.0:
            ok = False
            z = 1e-12
        v2[i, 0] = fx * vc[i, 0] / z + cx
        v2[i, 1] = fy * vc[i, 1] / z + cy
    bbox[0] = v2[:, 0].min() - margin
    bbox[1] = v2[:, 0].max() + margin
    bbox[2] = v2[:, 1].min() - margin
    bbox[3] = v2[:, 1].max() + margin
    return ok


@numba.njit(cache=True)
def _segment_distance(u, v, x0, y0, x1, y1):
    """Distance from (u, v) to the segment, clamped to its extent."""
    dx = x1 - x0
    dy = y1 - y0
    l2 = dx * dx + dy * dy
    if l2 <= 0.0:
        return math.inf
    s = ((u - x0) * dx + (v - y0) * dy) / l2
    if s < 0.0:
        s = 0.0
    elif s > 1.0:
        s = 1.0
    ex = u - (x0 + s * dx)
    ey = v - (y0 + s * dy)
    return math.sqrt(ex * ex + ey * ey)


@numba.njit(cache=True)
def _match_core(u, v, vc, v2, bbox, fx, fy, cx, cy, thr, out):
    """Match one event. Returns the segment index, or -1 when discarded.

    ``out`` receives distance, alpha1, alpha2, F (3), E (3), M (3).
    """
    if u < bbox[0] or u > bbox[1] or v < bbox[2] or v > bbox[3]:
        return -1
    nv = v2.shape[0]
    best = -1
    dbest = math.inf
    for i in range(nv):
        j = (i + 1) % nv
        d = _segment_distance(u, v, v2[i, 0], v2[i, 1], v2[j, 0], v2[j, 1])
        if d < dbest:
            dbest = d
            best = i
    if best < 0 or dbest > thr:
        return -1
    i = best
    j = (i + 1) % nv
    mx = (u - cx) / fx
    my = (v - cy) / fy
    mz = 1.0
    px, py, pz = vc[i, 0], vc[i, 1], vc[i, 2]
    sx, sy, sz = vc[j, 0] - px, vc[j, 1] - py, vc[j, 2] - pz
    mm = mx * mx + my * my + mz * mz
    ms = mx * sx + my * sy + mz * sz
    ss = sx * sx + sy * sy + sz * sz
    pm = px * mx + py * my + pz * mz
    ps = px * sx + py * sy + pz * sz
    # [-mm  ms][a1]   [-pm]
    # [-ms  ss][a2] = [-ps]
    det = -mm * ss + ms * ms
    if abs(det) <= 1e-15 * mm * ss:
        return -1
    a1 = (-pm * ss + ms * ps) / det
    a2 = (mm * ps - ms * pm) / det
    out[0] = dbest
    out[1] = a1
    out[2] = a2
    out[3] = a1 * mx
    out[4] = a1 * my
    out[5] = a1 * mz
    out[6] = px + a2 * sx
    out[7] = py + a2 * sy
    out[8] = pz + a2 * sz
    out[9] = mx
    out[10] = my
    out[11] = mz
    return i


@numba.njit(cache=True)
def _accumulate_core(mx, my, mz, ex, ey, ez, T, A, B, G, w0, gain, lever_camera):
    mm = mx * mx + my * my + mz * mz
    w1 = 1.0 - w0
    m0 = mx
    m1 = my
    m2 = mz
    # A <- w0 (I - L) + (1 - w0) A, L = M M^T / M^T M
    A[0, 0] = w0 * (1.0 - m0 * m0 / mm) + w1 * A[0, 0]
    A[1, 1] = w0 * (1.0 - m1 * m1 / mm) + w1 * A[1, 1]
    A[2, 2] = w0 * (1.0 - m2 * m2 / mm) + w1 * A[2, 2]
    a01 = w0 * (-m0 * m1 / mm) + w1 * A[0, 1]
    a02 = w0 * (-m0 * m2 / mm) + w1 * A[0, 2]
    a12 = w0 * (-m1 * m2 / mm) + w1 * A[1, 2]
    A[0, 1] = a01
    A[1, 0] = a01
    A[0, 2] = a02
    A[2, 0] = a02
    A[1, 2] = a12
    A[2, 1] = a12
    # residual (L - I) E: from the model point to its foot on the line of sight
    k = (mx * ex + my * ey + mz * ez) / mm
    rx = k * mx - ex
    ry = k * my - ey
    rz = k * mz - ez
    B[0] = w0 * rx + w1 * B[0]
    B[1] = w0 * ry + w1 * B[1]
    B[2] = w0 * rz + w1 * B[2]
    if lever_camera:
        lx, ly, lz = ex, ey, ez
    else:
        lx, ly, lz = ex - T[0], ey - T[1], ez - T[2]
    G[0] = w0 * gain * (ly * rz - lz * ry) + w1 * G[0]
    G[1] = w0 * gain * (lz * rx - lx * rz) + w1 * G[1]
    G[2] = w0 * gain * (lx * ry - ly * rx) + w1 * G[2]


@numba.njit(cache=True)
def _sym_eig_extremes(A):
    """Smallest and largest eigenvalue of a symmetric 3x3 matrix (closed form)."""
    a00, a11, a22 = A[0, 0], A[1, 1], A[2, 2]
    a01, a02, a12 = A[0, 1], A[0, 2], A[1, 2]
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    if p1 == 0.0:
        return min(a00, min(a11, a22)), max(a00, max(a11, a22))
    q = (a00 + a11 + a22) / 3.0
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b00 = (a00 - q) / p
    b11 = (a11 - q) / p
    b22 = (a22 - q) / p
    b01 = a01 / p
    b02 = a02 / p
    b12 = a12 / p
    r = 0.5 * (b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
               + b02 * (b01 * b12 - b11 * b02))
    if r <= -1.0:
        phi = math.pi / 3.0
    elif r >= 1.0:
        phi = 0.0
    else:
        phi = math.acos(r) / 3.0
    e1 = q + 2.0 * p * math.cos(phi)
    e3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    return e3, e1


@numba.njit(cache=True)
def _apply_core(R, T, A, B, G, lam_t, lam_r, cond_limit, dR, tmp, vc, fx, fy, max_step):
    """Pose update from the accumulators. Returns False when A is ill-conditioned.

    ``vc`` holds the camera-frame corners at the current pose; with
    ``max_step > 0`` the translation step is shrunk so none of them moves
    more than ``max_step`` pixels.
    """
    lo, hi = _sym_eig_extremes(A)
    if lo <= 0.0 or hi > cond_limit * lo:
        return False
    c00 = A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    c01 = A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]
    c02 = A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]
    det = A[0, 0] * c00 + A[0, 1] * c01 + A[0, 2] * c02
    c10 = A[0, 2] * A[2, 1] - A[0, 1] * A[2, 2]
    c11 = A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
    c12 = A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]
    c20 = A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]
    c21 = A[0, 2] * A[1, 0] - A[0, 0] * A[1, 2]
    c22 = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    # inverse = adjugate / det, adjugate is the transposed cofactor matrix
    dx = (c00 * B[0] + c10 * B[1] + c20 * B[2]) / det
    dy = (c01 * B[0] + c11 * B[1] + c21 * B[2]) / det
    dz = (c02 * B[0] + c12 * B[1] + c22 * B[2]) / det
    dx *= lam_t
    dy *= lam_t
    dz *= lam_t
    if max_step > 0.0:
        worst = 0.0
        for i in range(vc.shape[0]):
            z0 = vc[i, 2]
            z1 = z0 + dz
            if z1 <= 0.0:
                worst = np.inf
                break
            du = fx * ((vc[i, 0] + dx) / z1 - vc[i, 0] / z0)
            dv = fy * ((vc[i, 1] + dy) / z1 - vc[i, 1] / z0)
            worst = max(worst, np.sqrt(du * du + dv * dv))
        if worst > max_step:
            k = max_step / worst
            dx *= k
            dy *= k
            dz *= k
    T[0] += dx
    T[1] += dy
    T[2] += dz
    _exp_rot(lam_r * G[0], lam_r * G[1], lam_r * G[2], dR)
    for r in range(3):
        for c in range(3):
            tmp[r, c] = dR[r, 0] * R[0, c] + dR[r, 1] * R[1, c] + dR[r, 2] * R[2, c]
    for r in range(3):
        for c in range(3):
            R[r, c] = tmp[r, c]
    return True


@numba.njit(cache=True)
def _reortho(R):
    U, s, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0.0:
        U[:, 2] = -U[:, 2]
        Q = U @ Vt
    R[:, :] = Q


@numba.njit(cache=True, nogil=True)
def _track_kernel(xs, ys, ts, R, T, A, B, G, cnt, verts, cam, fp, ip,
                  matched, upd_idx, upd_T, upd_R):
    fx, fy, cx, cy = cam[0], cam[1], cam[2], cam[3]
    w0, lam_t, lam_r, thr, cond_limit, gain_base, max_step = fp[0], fp[1], fp[2], fp[3], fp[4], fp[5], fp[6]
    n_every, count_unmatched, lever_camera, ortho_every, record, pixel_units = (
        ip[0], ip[1], ip[2], ip[3], ip[4], ip[5])
    nv = verts.shape[0]
    vc = np.empty((nv, 3))
    v2 = np.empty((nv, 2))
    bbox = np.empty(4)
    out = np.empty(12)
    dR = np.empty((3, 3))
    tmp = np.empty((3, 3))
    fbar = 0.5 * (fx + fy)
    if not _project_vertices(R, T, verts, fx, fy, cx, cy, vc, v2, bbox, thr):
        cnt[STATUS] = STATUS_BEHIND_CAMERA
    nupd = 0
    for k in range(xs.shape[0]):
        cnt[LAST_T] = ts[k]
        if cnt[STATUS] != STATUS_OK:
            cnt[DISCARDED] += 1
            continue
        seg = _match_core(np.float64(xs[k]), np.float64(ys[k]), vc, v2, bbox,
                          fx, fy, cx, cy, thr, out)
        if seg < 0:
            cnt[DISCARDED] += 1
            if not count_unmatched:
                continue
        else:
            if record:
                matched[k] = True
            gain = gain_base * fbar / out[8] if pixel_units else 1.0
            _accumulate_core(out[9], out[10], out[11], out[6], out[7], out[8],
                             T, A, B, G, w0, gain, lever_camera)
            cnt[MATCHED] += 1
        cnt[SINCE] += 1
        if cnt[SINCE] >= n_every:
            cnt[SINCE] = 0
            if _apply_core(R, T, A, B, G, lam_t, lam_r, cond_limit, dR, tmp, vc, fx, fy, max_step):
                cnt[ROT_SINCE_ORTHO] += 1
                if cnt[ROT_SINCE_ORTHO] >= ortho_every:
                    _reortho(R)
                    cnt[ROT_SINCE_ORTHO] = 0
                cnt[UPDATES] += 1
                upd_idx[nupd] = k
                upd_T[nupd, :] = T
                upd_R[nupd, :, :] = R
                nupd += 1
                if not _project_vertices(R, T, verts, fx, fy, cx, cy, vc, v2, bbox, thr):
                    cnt[STATUS] = STATUS_BEHIND_CAMERA
            else:
                cnt[SKIPPED] += 1
    return nupd


# --------------------------------------------------------------------------
# public API

def _params(cfg: TrackerConfig, model: MarkerModel):
    gain_base = 2.0 / model.side if cfg.torque_units == "pixel" else 1.0
    fp = np.array([cfg.w0, cfg.lambda_t, cfg.lambda_r, cfg.match_threshold,
                   cfg.condition_limit, gain_base, cfg.max_step_px or 0.0])
    ip = np.array([cfg.update_every_n, int(cfg.count_unmatched),
                   int(cfg.torque_lever == "camera"), cfg.reorthonormalize_every,
                   0, int(cfg.torque_units == "pixel")], dtype=np.int64)
    return fp, ip


def _cam(intrinsics: CameraIntrinsics):
    return np.array([intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy])


def match_event(state: TrackerState, model: MarkerModel, intrinsics: CameraIntrinsics,
                e, cfg: TrackerConfig) -> MatchResult | None:
    """Closest-edge match of one event against the current pose, or ``None``."""
    ev = _as_events(e)
    cam = _cam(intrinsics)
    vc = np.empty((4, 3))
    v2 = np.empty((4, 2))
    bbox = np.empty(4)
    if not _project_vertices(state.rotation, state.translation, model.vertices,
                             *cam, vc, v2, bbox, cfg.match_threshold):
        return None
    out = np.empty(12)
    seg = _match_core(float(ev["x"][0]), float(ev["y"][0]), vc, v2, bbox, *cam,
                      cfg.match_threshold, out)
    if seg < 0:
        return None
    if cfg.torque_units == "pixel":
        gain = (2.0 / model.side) * 0.5 * (intrinsics.fx + intrinsics.fy) / out[8]
    else:
        gain = 1.0
    return MatchResult(int(seg), float(out[0]), float(out[1]), float(out[2]),
                       out[3:6].copy(), out[6:9].copy(), out[9:12].copy(), float(gain))


def accumulate(state: TrackerState, m: MatchResult, cfg: TrackerConfig) -> TrackerState:
    """Blend one accepted match into A, B and the torque; returns a new state."""
    s = state.copy()
    _accumulate_core(*m.direction, *m.e_point, s.translation, s.acc_a, s.acc_b, s.acc_torque,
                     cfg.w0, m.torque_gain, cfg.torque_lever == "camera")
    s.counters[SINCE] += 1
    s.counters[MATCHED] += 1
    return s


def apply_update(state: TrackerState, cfg: TrackerConfig, model: MarkerModel | None = None,
                 intrinsics: CameraIntrinsics | None = None) -> TrackerState:
    """Move the pose by the accumulated translation solve and torque step.

    The accumulators are kept (their blending already forgets old events);
    only the event counter resets. If A is too ill-conditioned the pose is
    left alone and the skip is counted. The step cap ``cfg.max_step_px``
    needs ``model`` and ``intrinsics``; without them the step is uncapped.
    """
    s = state.copy()
    s.counters[SINCE] = 0
    vc = np.empty((0, 3))
    fx = fy = 0.0
    cap = 0.0
    if model is not None and intrinsics is not None and cfg.max_step_px:
        vc = s.pose.transform(model.vertices)
        fx, fy, cap = intrinsics.fx, intrinsics.fy, cfg.max_step_px
    ok = _apply_core(s.rotation, s.translation, s.acc_a, s.acc_b, s.acc_torque,
                     cfg.lambda_t, cfg.lambda_r, cfg.condition_limit,
                     np.empty((3, 3)), np.empty((3, 3)), vc, fx, fy, cap)
    if not ok:
        s.counters[SKIPPED] += 1
        return s
    s.counters[UPDATES] += 1
    s.counters[ROT_SINCE_ORTHO] += 1
    if s.counters[ROT_SINCE_ORTHO] >= cfg.reorthonormalize_every:
        s.rotation = reorthonormalize(s.rotation)
        s.counters[ROT_SINCE_ORTHO] = 0
    return s


class Tracker:
    """Stateful tracker for one marker, driven by event batches.

    Not thread safe; one tracker belongs to one execution context at a time.
    """

    def __init__(self, model: MarkerModel, intrinsics: CameraIntrinsics, pose: Pose | TrackerState,
                 config: TrackerConfig | None = None):
        self.model = model
        self.intrinsics = intrinsics
        self.config = config or TrackerConfig()
        self.state = pose.copy() if isinstance(pose, TrackerState) else TrackerState.initial(pose)
        self._cam = _cam(intrinsics)
        self._fp, self._ip = _params(self.config, model)
        self._verts = np.ascontiguousarray(model.vertices)

    @property
    def pose(self) -> Pose:
        return self.state.pose

    @property
    def lost_geometry(self) -> bool:
        return self.state.status != STATUS_OK

    def process(self, events, return_matched: bool = False):
        """Feed a batch and return the pose samples.

        With ``return_matched`` the result is ``(samples, matched_mask,
        update_index)`` where ``update_index[i]`` is the batch position of the
        event that triggered sample ``i``. Events are consumed in array order;
        pass ``events[::-1]`` to replay backwards.
        """
        ev = _as_events(events)
        n = len(ev)
        cap = n // self.config.update_every_n + 2
        upd_idx = np.empty(cap, np.int64)
        upd_T = np.empty((cap, 3))
        upd_R = np.empty((cap, 3, 3))
        matched = np.zeros(n if return_matched else 0, dtype=np.bool_)
        ip = self._ip
        if return_matched:
            ip = ip.copy()
            ip[4] = 1
        s = self.state
        k = _track_kernel(ev["x"], ev["y"], ev["t"], s.rotation, s.translation, s.acc_a, s.acc_b,
                          s.acc_torque, s.counters, self._verts, self._cam, self._fp, ip,
                          matched, upd_idx, upd_T, upd_R)
        samples = PoseSamples(ev["t"][upd_idx[:k]].astype(np.int64), upd_T[:k].copy(),
                              upd_R[:k].copy(), self.model.id)
        if return_matched:
            return samples, matched, upd_idx[:k].copy()
        return samples


def process_events(state: TrackerState, model: MarkerModel, intrinsics: CameraIntrinsics,
                   events, cfg: TrackerConfig):
    """Fold a timestamp-ordered batch into ``state``.

    Returns ``(new_state, samples)`` with one sample per applied update,
    stamped with the time of the event that triggered it.
    """
    ev = _as_events(events)
    if len(ev) > 1 and np.any(np.diff(ev["t"]) < 0):
        from .events import StreamOrderError
        raise StreamOrderError("process_events needs timestamp-ordered events")
    tr = Tracker(model, intrinsics, state, cfg)
    samples = tr.process(ev)
    return tr.state, samples


def empty_events():
    return np.empty(0, dtype=EVENT_DTYPE)


def with_config(cfg: TrackerConfig, **kw) -> TrackerConfig:
    return replace(cfg, **kw)
