"""Synthetic event camera.

A marker moving along a keyframed trajectory is rasterised through the pinhole
model every ``sim_step`` µs; each pixel emits one event per ``contrast_threshold``
crossing of its log intensity, timestamped by linear interpolation inside the
step. Ground-truth poses are sampled at every step.

Fidelity assumptions: ideal pinhole optics, no refractory period, no hot
pixels, no bandwidth limit, uniform Poisson background noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.spatial.transform import Rotation

from .core import CameraIntrinsics, MarkerModel, Pose, exp_rotation, log_rotation
from .events import EVENT_DTYPE, FrameSnapshot, make_events
from .tracker import PoseSamples

__all__ = [
    "Trajectory",
    "SimConfig",
    "RenderStyle",
    "render_frame",
    "render_event_frame",
    "generate_events",
    "evaluate_tracking",
    "TrackingErrorReport",
    "read_trajectory",
    "write_trajectory",
    "read_poses",
    "write_poses",
]


@dataclass(frozen=True)
class RenderStyle:
    black: float = 0.1
    white: float = 0.9
    background: float = 0.5
    quiet_zone: float = 1.0  # white margin width, in cells
    supersample: int = 2


@dataclass(frozen=True)
class SimConfig:
    contrast_threshold: float = 0.2
    sim_step: int = 100
    noise_rate: float = 0.1
    seed: int = 0
    style: RenderStyle = field(default_factory=RenderStyle)

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")
        if self.sim_step < 1:
            raise ValueError("sim_step must be >= 1 µs")


class Trajectory:
    """Keyframed pose trajectory: linear in translation, geodesic in rotation."""

    def __init__(self, keyframes):
        keyframes = list(keyframes)
        if not keyframes:
            raise ValueError("trajectory needs at least one keyframe")
        self.times = np.array([int(t) for t, _ in keyframes], dtype=np.int64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("keyframe timestamps must be strictly increasing")
        self.poses = [p for _, p in keyframes]
        if any(p.translation[2] <= 0 for p in self.poses):
            raise ValueError("keyframe poses must have positive depth")
        self._T = np.array([p.translation for p in self.poses])
        self._R = np.array([p.rotation for p in self.poses])
        self._rel = [log_rotation(self._R[i].T @ self._R[i + 1]) for i in range(len(self.poses) - 1)]

    @property
    def start(self) -> int:
        return int(self.times[0])

    @property
    def end(self) -> int:
        return int(self.times[-1])

    def pose_at(self, t) -> Pose:
        R, T = self._interp(float(t))
        return Pose(R, T)

    def _interp(self, t):
        if t <= self.times[0] or len(self.times) == 1:
            return self._R[0], self._T[0]
        if t >= self.times[-1]:
            return self._R[-1], self._T[-1]
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        s = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        T = (1 - s) * self._T[i] + s * self._T[i + 1]
        R = self._R[i] @ exp_rotation(s * self._rel[i])
        return R, T

    def sample(self, times) -> PoseSamples:
        times = np.asarray(times, dtype=np.int64)
        Rs = np.empty((len(times), 3, 3))
        Ts = np.empty((len(times), 3))
        for k, t in enumerate(times):
            Rs[k], Ts[k] = self._interp(float(t))
        return PoseSamples(times.copy(), Ts, Rs)


# --------------------------------------------------------------------------
# rendering

def _plane_homography_inv(pose: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Maps pixel (u, v, 1) to (X, Y, 1) / depth-scale on the marker plane."""
    R, T = pose.rotation, pose.translation
    H = intrinsics.K @ np.column_stack([R[:, 0], R[:, 1], T])
    return np.linalg.inv(H)


@numba.njit(cache=True)
def _texture(X, Y, half, cell, qz_half, grid, black, white, bg):
    if abs(X) <= half and abs(Y) <= half:
        n = grid.shape[0]
        c = int((X + half) / cell)
        r = int((Y + half) / cell)
        if c >= n:
            c = n - 1
        if r >= n:
            r = n - 1
        return white if grid[r, c] else black
    if abs(X) <= qz_half and abs(Y) <= qz_half:
        return white
    return bg


@numba.njit(cache=True)
def _render_region(Hi, x0, x1, y0, y1, half, cell, qz_half, grid, black, white, bg, ss, out):
    inv = 1.0 / (ss * ss)
    for y in range(y0, y1):
        for x in range(x0, x1):
            acc = 0.0
            for sy in range(ss):
                v = y - 0.5 + (sy + 0.5) / ss
                for sx in range(ss):
                    u = x - 0.5 + (sx + 0.5) / ss
                    w = Hi[2, 0] * u + Hi[2, 1] * v + Hi[2, 2]
                    if w <= 0.0:
                        acc += bg
                        continue
                    X = (Hi[0, 0] * u + Hi[0, 1] * v + Hi[0, 2]) / w
                    Y = (Hi[1, 0] * u + Hi[1, 1] * v + Hi[1, 2]) / w
                    acc += _texture(X, Y, half, cell, qz_half, grid, black, white, bg)
            out[y, x] = acc * inv


def _footprint(pose, model, intrinsics, style, pad=2):
    """Pixel box covering the marker and its quiet zone, or the full sensor."""
    qz_half = 0.5 * model.side + style.quiet_zone * model.cell_size
    corners = np.array([[-qz_half, -qz_half, 0], [qz_half, -qz_half, 0],
                        [qz_half, qz_half, 0], [-qz_half, qz_half, 0]])
    Xc = pose.transform(corners)
    W, H = intrinsics.width, intrinsics.height
    if np.any(Xc[:, 2] <= 1e-6):
        return 0, W, 0, H
    u = intrinsics.fx * Xc[:, 0] / Xc[:, 2] + intrinsics.cx
    v = intrinsics.fy * Xc[:, 1] / Xc[:, 2] + intrinsics.cy
    x0 = int(np.clip(np.floor(u.min()) - pad, 0, W))
    x1 = int(np.clip(np.ceil(u.max()) + pad + 1, 0, W))
    y0 = int(np.clip(np.floor(v.min()) - pad, 0, H))
    y1 = int(np.clip(np.ceil(v.max()) + pad + 1, 0, H))
    return x0, x1, y0, y1


def _render_into(out, pose, model, intrinsics, style, box):
    x0, x1, y0, y1 = box
    if x1 <= x0 or y1 <= y0:
        return
    qz_half = 0.5 * model.side + style.quiet_zone * model.cell_size
    _render_region(_plane_homography_inv(pose, intrinsics), x0, x1, y0, y1,
                   0.5 * model.side, model.cell_size, qz_half,
                   np.ascontiguousarray(model.full_grid()), style.black, style.white,
                   style.background, style.supersample, out)


def render_frame(pose: Pose, model: MarkerModel, intrinsics: CameraIntrinsics,
                 style: RenderStyle | None = None) -> np.ndarray:
    """Intensity image in [0, 1]: marker with white quiet zone on mid-gray."""
    style = style or RenderStyle()
    img = np.full((intrinsics.height, intrinsics.width), style.background)
    _render_into(img, pose, model, intrinsics, style, _footprint(pose, model, intrinsics, style))
    return img


def render_event_frame(pose: Pose, model: MarkerModel, intrinsics: CameraIntrinsics,
                       style: RenderStyle | None = None, margin: float = 0.1,
                       timestamp: int = 0) -> FrameSnapshot:
    """Idealised last-polarity frame: -1 on dark cells, +1 on light, 0 elsewhere.

    This is what the event frame converges to once the marker has moved over
    every pixel it covers.
    """
    style = style or RenderStyle()
    img = render_frame(pose, model, intrinsics, style)
    pol = np.zeros(img.shape, dtype=np.int8)
    pol[img < style.background - margin] = -1
    pol[img > style.background + margin] = 1
    pol.flags.writeable = False
    return FrameSnapshot(pol, timestamp)


# --------------------------------------------------------------------------
# event generation

@numba.njit(cache=True)
def _emit(x0, x1, y0, y1, new, prev_log, ref, C, t_prev, dt, out_t, out_x, out_y, out_p, n):
    for y in range(y0, y1):
        for x in range(x0, x1):
            L = math.log(new[y, x])
            Lp = prev_log[y, x]
            dL = L - Lp
            r = ref[y, x]
            if dL > 0.0:
                while L - r >= C:
                    r += C
                    out_t[n] = t_prev + int(round(dt * (r - Lp) / dL))
                    out_x[n] = x
                    out_y[n] = y
                    out_p[n] = 1
                    n += 1
            elif dL < 0.0:
                while r - L >= C:
                    r -= C
                    out_t[n] = t_prev + int(round(dt * (r - Lp) / dL))
                    out_x[n] = x
                    out_y[n] = y
                    out_p[n] = -1
                    n += 1
            ref[y, x] = r
            prev_log[y, x] = L
    return n


def generate_events(traj: Trajectory, model: MarkerModel, intrinsics: CameraIntrinsics,
                    cfg: SimConfig | None = None):
    """Simulate the event stream for ``traj``.

    Returns ``(events, truth)``: a timestamp-sorted :data:`EVENT_DTYPE` array
    and the ground-truth :class:`PoseSamples` at every simulation step.
    """
    cfg = cfg or SimConfig()
    style = cfg.style
    W, H = intrinsics.width, intrinsics.height
    C = cfg.contrast_threshold
    img = np.full((H, W), style.background)
    steps = np.arange(traj.start, traj.end + 1, cfg.sim_step, dtype=np.int64)
    if steps[-1] != traj.end:
        steps = np.append(steps, traj.end)
    truth = traj.sample(steps)
    truth.marker_id = model.id

    pose = truth.pose(0)
    box = _footprint(pose, model, intrinsics, style)
    _render_into(img, pose, model, intrinsics, style, box)
    prev_log = np.log(img)
    ref = prev_log.copy()

    per_px = int(math.ceil(abs(math.log(style.white / style.black)) / C)) + 2
    cap = 1 << 20
    bt = np.empty(cap, np.int64)
    bx = np.empty(cap, np.uint16)
    by = np.empty(cap, np.uint16)
    bp = np.empty(cap, np.int8)
    n = 0
    for k in range(1, len(steps)):
        if (np.array_equal(truth.translation[k], truth.translation[k - 1])
                and np.array_equal(truth.rotation[k], truth.rotation[k - 1])):
            continue  # unchanged image, no crossings
        pose = truth.pose(k)
        nbox = _footprint(pose, model, intrinsics, style)
        ubox = (min(box[0], nbox[0]), max(box[1], nbox[1]), min(box[2], nbox[2]), max(box[3], nbox[3]))
        x0, x1, y0, y1 = ubox
        need = max(0, (x1 - x0) * (y1 - y0)) * per_px
        if n + need > cap:
            cap = max(2 * cap, n + need)
            bt, bx, by, bp = (np.resize(a, cap) for a in (bt, bx, by, bp))
        if x1 > x0 and y1 > y0:
            img[y0:y1, x0:x1] = style.background
            _render_into(img, pose, model, intrinsics, style, nbox)
            n = _emit(x0, x1, y0, y1, img, prev_log, ref, C, int(steps[k - 1]),
                      float(steps[k] - steps[k - 1]), bt, bx, by, bp, n)
        box = nbox

    t, x, y, p = bt[:n], bx[:n], by[:n], bp[:n]
    rng = np.random.default_rng(cfg.seed)
    duration = (traj.end - traj.start) * 1e-6
    n_noise = rng.poisson(cfg.noise_rate * W * H * duration) if cfg.noise_rate > 0 else 0
    if n_noise:
        t = np.concatenate([t, rng.integers(traj.start, traj.end + 1, n_noise)])
        x = np.concatenate([x, rng.integers(0, W, n_noise).astype(np.uint16)])
        y = np.concatenate([y, rng.integers(0, H, n_noise).astype(np.uint16)])
        p = np.concatenate([p, rng.choice(np.array([-1, 1], np.int8), n_noise)])
    o = np.argsort(t, kind="stable")
    # built column-wise so the record padding is always zero
    ev = make_events(t[o], x[o], y[o], p[o])
    return ev, truth


# --------------------------------------------------------------------------
# evaluation

@dataclass
class TrackingErrorReport:
    translation_mean_mm: float
    translation_std_mm: float
    translation_max_mm: float
    rotation_mean_rad: float
    rotation_std_rad: float
    rotation_max_rad: float
    n_samples: int
    coverage: float
    update_rate_t: np.ndarray
    update_rate_hz: np.ndarray
    translation_errors_mm: np.ndarray
    rotation_errors_rad: np.ndarray

    def summary(self) -> dict:
        return {
            "translation_mm": {"mean": self.translation_mean_mm, "std": self.translation_std_mm,
                               "max": self.translation_max_mm},
            "rotation_rad": {"mean": self.rotation_mean_rad, "std": self.rotation_std_rad,
                             "max": self.rotation_max_rad},
            "n_samples": self.n_samples,
            "coverage": self.coverage,
            "update_rate_hz": {
                "mean": float(self.update_rate_hz.mean()) if len(self.update_rate_hz) else 0.0,
                "max": float(self.update_rate_hz.max()) if len(self.update_rate_hz) else 0.0,
            },
        }


def _geodesic(Ra, Rb):
    c = (np.einsum("nij,nij->n", Ra, Rb) - 1.0) * 0.5
    return np.arccos(np.clip(c, -1.0, 1.0))


def evaluate_tracking(estimated: PoseSamples, truth: PoseSamples) -> TrackingErrorReport:
    """Compare estimates with ground truth interpolated to the estimate times.

    Estimates outside the ground-truth time span are ignored.
    """
    if len(estimated) == 0 or len(truth) == 0:
        raise ValueError("both pose series must be non-empty")
    tt = truth.t
    inside = (estimated.t >= tt[0]) & (estimated.t <= tt[-1])
    if not np.any(inside):
        raise ValueError("estimated and ground-truth series do not overlap in time")
    te = estimated.t[inside]
    i = np.clip(np.searchsorted(tt, te, side="right") - 1, 0, len(tt) - 1)
    j = np.minimum(i + 1, len(tt) - 1)
    span = (tt[j] - tt[i]).astype(float)
    s = np.where(span > 0, (te - tt[i]) / np.where(span > 0, span, 1.0), 0.0)
    T_gt = (1 - s)[:, None] * truth.translation[i] + s[:, None] * truth.translation[j]
    R_gt = np.empty((len(te), 3, 3))
    for k in range(len(te)):
        Ri, Rj = truth.rotation[i[k]], truth.rotation[j[k]]
        R_gt[k] = Ri @ exp_rotation(s[k] * log_rotation(Ri.T @ Rj)) if s[k] > 0 else Ri
    et = 1e3 * np.linalg.norm(estimated.translation[inside] - T_gt, axis=1)
    er = _geodesic(estimated.rotation[inside], R_gt)
    dt = np.diff(te)
    ok = dt > 0
    rate = 1e6 / dt[ok]
    cover = float((te[-1] - te[0]) / max(1, tt[-1] - tt[0]))
    return TrackingErrorReport(
        float(et.mean()), float(et.std()), float(et.max()),
        float(er.mean()), float(er.std()), float(er.max()),
        int(len(te)), cover, te[1:][ok], rate, et, er,
    )


# --------------------------------------------------------------------------
# files

_TRAJ_HEADER = "t_us,tx,ty,tz,qw,qx,qy,qz"


def _quat_wxyz(R):
    q = Rotation.from_matrix(R).as_quat()  # x, y, z, w
    return np.concatenate([q[..., 3:], q[..., :3]], axis=-1)


def _from_wxyz(q):
    q = np.asarray(q, dtype=float)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1)).as_matrix()


def write_poses(samples: PoseSamples, path) -> None:
    """Ground-truth/trajectory CSV: ``t_us,tx,ty,tz,qw,qx,qy,qz``."""
    with open(path, "w") as fh:
        fh.write(_TRAJ_HEADER + "\n")
        if len(samples):
            q = _quat_wxyz(samples.rotation)
            for t, T, qq in zip(samples.t, samples.translation, q):
                fh.write(f"{int(t)},{T[0]:.9g},{T[1]:.9g},{T[2]:.9g},"
                         f"{qq[0]:.12g},{qq[1]:.12g},{qq[2]:.12g},{qq[3]:.12g}\n")


def read_poses(path) -> PoseSamples:
    if not Path(path).read_text().partition("\n")[2].strip():
        return PoseSamples.empty()
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.size == 0:
        return PoseSamples.empty()
    if arr.shape[1] != 8:
        raise ValueError(f"{path}: expected 8 columns ({_TRAJ_HEADER})")
    return PoseSamples(arr[:, 0].astype(np.int64), arr[:, 1:4].copy(), _from_wxyz(arr[:, 4:8]))


def read_trajectory(path) -> Trajectory:
    s = read_poses(path)
    return Trajectory((int(t), s.pose(i)) for i, t in enumerate(s.t))


def write_trajectory(traj: Trajectory, path) -> None:
    write_poses(PoseSamples(traj.times.copy(), np.array([p.translation for p in traj.poses]),
                            np.array([p.rotation for p in traj.poses])), path)
