"""Canned desk-scale scenes used by the demos, the benchmarks and the tests.

Everything here is seeded and deterministic.
"""
from __future__ import annotations

import numpy as np

from .core import CameraIntrinsics, MarkerModel, Pose, exp_rotation, project_point
from .detector import default_dictionary
from .events import EVENT_DTYPE
from .simulator import SimConfig, Trajectory, generate_events

__all__ = [
    "desk_camera",
    "demo_marker",
    "benchmark_trajectory",
    "fast_trajectory",
    "random_visible_pose",
    "detection_poses",
    "approach_trajectory",
    "sweep_frame",
    "peak_pixel_speed",
    "tile_stream",
    "loop_trajectory",
    "cruise_trajectory",
    "bench_stream",
    "simulate",
]


def desk_camera() -> CameraIntrinsics:
    """VGA pinhole camera with a ~56 degree horizontal field of view."""
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


def demo_marker(marker_id: int = 7, side: float = 0.1) -> MarkerModel:
    return default_dictionary().model(marker_id, side)


def _pose(rv, t) -> Pose:
    return Pose(exp_rotation(rv), t)


def benchmark_trajectory() -> Trajectory:
    """1.6 s sweeping depth from 0.35 m out to 1.0 m and back.

    It opens with a short diagonal move so the event frame fills in quickly.
    In-plane rotation is brisk; tilt stays small because tilt is the
    slowest axis for the tracker.
    """
    kf = [
        (0, _pose([0.0, 0.0, 0.0], [0.0, 0.0, 0.35])),
        (60_000, _pose([0.02, -0.02, 0.05], [0.02, 0.02, 0.36])),
        (300_000, _pose([0.04, 0.02, 0.40], [-0.05, -0.03, 0.50])),
        (550_000, _pose([-0.03, 0.04, 0.10], [0.10, 0.05, 0.75])),
        (800_000, _pose([0.02, -0.04, -0.30], [-0.10, -0.02, 1.00])),
        (1_050_000, _pose([0.04, 0.00, -0.60], [0.12, 0.08, 0.85])),
        (1_300_000, _pose([-0.02, 0.04, -0.20], [-0.06, 0.00, 0.60])),
        (1_600_000, _pose([0.0, 0.0, 0.10], [0.03, -0.03, 0.40])),
    ]
    return Trajectory(kf)


def loop_trajectory(period: int = 400_000, depth: float = 0.5, spin: float = 0.3) -> Trajectory:
    """Closed loop around ``depth`` metres that ends where it starts, for tiling."""
    q = period // 4
    k = depth / 0.5
    kf = [
        (0, _pose([0.0, 0.0, 0.0], [0.0, 0.0, depth])),
        (q, _pose([0.05, 0.0, spin], [0.08 * k, 0.04 * k, depth])),
        (2 * q, _pose([0.0, 0.05, 0.0], [0.0, 0.06 * k, depth + 0.05])),
        (3 * q, _pose([-0.05, 0.0, -spin], [-0.08 * k, 0.02 * k, depth])),
        (period, _pose([0.0, 0.0, 0.0], [0.0, 0.0, depth])),
    ]
    return Trajectory(kf)


def cruise_trajectory(laps: int = 8) -> Trajectory:
    """Laps of :func:`loop_trajectory` after a short diagonal lead-in; eight
    laps is about 3.3 s."""
    lead = 60_000
    lap = loop_trajectory()
    kf = [(0, _pose([0.0, 0.0, 0.0], [-0.01, -0.01, 0.5]))]
    for k in range(laps):
        for t, p in zip(lap.times, lap.poses):
            if k and t == lap.start:
                continue
            kf.append((lead + k * (lap.end - lap.start) + int(t), p))
    return Trajectory(kf)


def bench_stream(total: int = 10_000_000, model=None, cam=None):
    """A recorded-style stream of ``total`` events by tiling the closed loop.

    Returns ``(events, start_pose)``.
    """
    traj = loop_trajectory()
    ev, truth = generate_events(traj, model or demo_marker(), cam or desk_camera(),
                                SimConfig(seed=1))
    period = traj.end - traj.start + 1
    return tile_stream(ev, total, period), truth.pose(0)


def _in_view(pose, model, cam, margin=1.5, border=4.0):
    half = 0.5 * model.side + margin * model.cell_size
    c = np.array([[-half, -half, 0], [half, -half, 0], [half, half, 0], [-half, half, 0]])
    X = pose.transform(c)
    if np.any(X[:, 2] <= 0.05):
        return False
    uv = project_point(pose, cam, c)
    return bool(np.all(uv >= border) and np.all(uv[:, 0] <= cam.width - 1 - border)
                and np.all(uv[:, 1] <= cam.height - 1 - border))


def random_visible_pose(rng, model, cam, depth=(0.3, 1.5), max_tilt=np.deg2rad(60)) -> Pose:
    """Random pose with the whole marker and its quiet zone inside the image."""
    for _ in range(10_000):
        z = rng.uniform(*depth)
        tilt = rng.uniform(0.0, max_tilt)
        az = rng.uniform(0.0, 2 * np.pi)
        spin = rng.uniform(-np.pi, np.pi)
        axis = np.array([np.cos(az), np.sin(az), 0.0])
        R = exp_rotation(tilt * axis) @ exp_rotation([0.0, 0.0, spin])
        x = rng.uniform(-0.4, 0.4) * z * cam.width / cam.fx
        y = rng.uniform(-0.4, 0.4) * z * cam.height / cam.fy
        p = Pose(R, [x, y, z])
        if _in_view(p, model, cam):
            return p
    raise RuntimeError("could not place the marker in view")


def detection_poses(n: int = 200, seed: int = 0, model=None, cam=None) -> list[Pose]:
    rng = np.random.default_rng(seed)
    model = model or demo_marker()
    cam = cam or desk_camera()
    return [random_visible_pose(rng, model, cam) for _ in range(n)]


def approach_trajectory(pose: Pose, rng, model=None, cam=None, cells: float = 3.0,
                        leg: int = 30_000) -> Trajectory:
    """Two perpendicular straight legs ending at ``pose``.

    Each leg covers ``cells`` marker cells in the image, so every edge of the
    pattern (including those parallel to one leg) gets crossed and painted.
    Falls back to a static trajectory when no in-view approach is found.
    """
    model = model or demo_marker()
    cam = cam or desk_camera()
    uv = project_point(pose, cam, model.vertices)
    cell_px = np.linalg.norm(uv[1] - uv[0]) / model.cells
    d = cells * cell_px * pose.translation[2] / cam.fx
    for _ in range(50):
        a = rng.uniform(0, 2 * np.pi)
        sgn = rng.choice([-1.0, 1.0])
        u1 = np.array([np.cos(a), np.sin(a), 0.0])
        u2 = np.array([-np.sin(a) * sgn, np.cos(a) * sgn, 0.0])
        spin = rng.uniform(-0.15, 0.15)
        p1 = Pose(pose.rotation @ exp_rotation([0, 0, spin / 2]), pose.translation - u2 * d)
        p0 = Pose(pose.rotation @ exp_rotation([0, 0, spin]), pose.translation - u2 * d - u1 * d)
        if _in_view(p0, model, cam) and _in_view(p1, model, cam):
            return Trajectory([(0, p0), (leg, p1), (2 * leg, pose)])
    return Trajectory([(0, pose), (leg, pose)])


def sweep_frame(pose: Pose, rng, model=None, cam=None, seed: int = 0, cells: float = 3.0):
    """Event-frame snapshot after simulating an approach to ``pose``.

    Events go through the default noise filter first, as in the pipeline.
    """
    from .events import EventFrame, NoiseFilter
    model = model or demo_marker()
    cam = cam or desk_camera()
    traj = approach_trajectory(pose, rng, model, cam, cells)
    ev, _ = generate_events(traj, model, cam, SimConfig(sim_step=1000, seed=seed))
    ev = ev[NoiseFilter(cam.width, cam.height).mask(ev)]
    return EventFrame(cam.width, cam.height).apply(ev).snapshot()


def fast_trajectory(seed: int, duration: int = 300_000, step: int = 100_000,
                    speed_px: float = 1500.0, depth=(0.45, 0.6), model=None, cam=None) -> Trajectory:
    """Random in-view wander with roughly ``speed_px`` px/s image-plane speed."""
    rng = np.random.default_rng(seed)
    model = model or demo_marker()
    cam = cam or desk_camera()
    z = rng.uniform(*depth)
    p = _pose([0, 0, rng.uniform(-0.5, 0.5)], [rng.uniform(-0.05, 0.05), rng.uniform(-0.03, 0.03), z])
    kf = [(0, p)]
    for t in range(step, duration + 1, step):
        for _ in range(1000):
            d = speed_px * (step * 1e-6) * z / cam.fx
            a = rng.uniform(0, 2 * np.pi)
            T = p.translation + [d * np.cos(a), d * np.sin(a), rng.uniform(-0.03, 0.03)]
            rv = p.rotvec() + rng.uniform(-0.15, 0.15, 3) * [1, 1, 2]
            q = _pose(rv, T)
            if depth[0] - 0.05 <= T[2] <= depth[1] + 0.05 and _in_view(q, model, cam):
                break
        else:
            raise RuntimeError("could not extend the trajectory in view")
        kf.append((t, q))
        p = q
    return Trajectory(kf)


def peak_pixel_speed(traj: Trajectory, cam: CameraIntrinsics, dt: int = 1000) -> float:
    """Largest image-plane speed of the marker centre, in px/s."""
    ts = np.arange(traj.start, traj.end + 1, dt)
    s = traj.sample(ts)
    uv = cam.fx * s.translation[:, :2] / s.translation[:, 2:3]
    v = np.linalg.norm(np.diff(uv, axis=0), axis=1) / (dt * 1e-6)
    return float(v.max())


def tile_stream(events: np.ndarray, total: int, period: int) -> np.ndarray:
    """Repeat a stream recorded over a closed trajectory until ``total`` events.

    Copy ``k`` is shifted by ``k * period`` µs so timestamps stay ordered.
    """
    reps = -(-total // len(events))
    out = np.zeros(reps * len(events), dtype=EVENT_DTYPE)
    n = len(events)
    for k in range(reps):
        out[k * n:(k + 1) * n] = events
        out["t"][k * n:(k + 1) * n] += k * period
    return out[:total]


def simulate(traj, model=None, cam=None, cfg: SimConfig | None = None):
    return generate_events(traj, model or demo_marker(), cam or desk_camera(), cfg)
