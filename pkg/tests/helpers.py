"""Shared scenes for the test suite, simulated once per session."""
from functools import lru_cache

import numpy as np

from evmarker.core import Pose, exp_rotation
from evmarker.scenes import (benchmark_trajectory, cruise_trajectory, demo_marker, desk_camera,
                             simulate)
from evmarker.simulator import SimConfig, Trajectory

CAM = desk_camera()
MODEL = demo_marker()


def reference_projection(R, T, K, p):
    """Straight-line K (R p + T) with the perspective divide."""
    X = R @ np.asarray(p, float) + T
    h = K @ X
    return h[:2] / h[2]


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_rotation(axis * rng.uniform(0, max_angle))


def fronto_pose(z=0.5, spin=0.0, x=0.0, y=0.0):
    return Pose(exp_rotation([0.0, 0.0, spin]), [x, y, z])


@lru_cache(maxsize=None)
def benchmark_scene():
    return simulate(benchmark_trajectory(), MODEL, CAM)


@lru_cache(maxsize=None)
def cruise_scene():
    return simulate(cruise_trajectory(), MODEL, CAM)


@lru_cache(maxsize=None)
def short_scene(seed=0, duration=300_000):
    """Short smooth motion at 0.5 m, about 300 ms."""
    p0 = fronto_pose(0.5)
    p1 = Pose(exp_rotation([0.03, -0.02, 0.25]), [0.03, 0.02, 0.52])
    traj = Trajectory([(0, p0), (duration, p1)])
    return simulate(traj, MODEL, CAM, SimConfig(seed=seed))


# ---- matching oracles

def grid_alpha(M, V, S, lo=(0.0, -1.0), hi=(3.0, 2.0), n=21, iters=36, shrink=0.5):
    """Brute-force minimiser of |a1 M - (V + a2 S)| by zooming grids.

    Vectorised over instances: M, V, S have shape (N, 3). The objective is a
    convex quadratic, so re-centring a shrinking grid on its best node
    converges to the unique minimiser.
    """
    M, V, S = (np.asarray(a, float) for a in (M, V, S))
    N = len(M)
    c = np.tile((np.array(lo) + np.array(hi)) / 2, (N, 1))
    h = np.tile((np.array(hi) - np.array(lo)) / 2, (N, 1))
    g = np.linspace(-1.0, 1.0, n)
    G1, G2 = np.meshgrid(g, g, indexing="ij")
    G1, G2 = G1.ravel(), G2.ravel()
    for _ in range(iters):
        a1 = c[:, :1] + h[:, :1] * G1[None]
        a2 = c[:, 1:] + h[:, 1:] * G2[None]
        d = a1[..., None] * M[:, None, :] - V[:, None, :] - a2[..., None] * S[:, None, :]
        k = np.argmin(np.einsum("nij,nij->ni", d, d), axis=1)
        c = np.column_stack([a1[np.arange(N), k], a2[np.arange(N), k]])
        h = h * shrink
    return c


def skew_lines_alpha(M, V, S):
    """Closed-form closest points of the lines a1 M and V + a2 S."""
    n = np.cross(M, S)
    nn = np.einsum("ij,ij->i", n, n)
    a1 = np.einsum("ij,ij->i", np.cross(V, S), n) / nn
    a2 = np.einsum("ij,ij->i", np.cross(V, M), n) / nn
    return np.column_stack([a1, a2])


def near_edge_instances(rng, n, cam=CAM, model=MODEL, max_off=1.5):
    """Random poses with an integer event pixel within ``max_off`` of an edge."""
    from evmarker.core import project_point
    from evmarker.scenes import random_visible_pose
    out = []
    while len(out) < n:
        pose = random_visible_pose(rng, model, cam, depth=(0.3, 1.5), max_tilt=np.deg2rad(60))
        uv = project_point(pose, cam, model.vertices)
        i = int(rng.integers(4))
        a, b = uv[i], uv[(i + 1) % 4]
        p = a + rng.uniform(0.1, 0.9) * (b - a)
        d = (b - a) / np.linalg.norm(b - a)
        p = p + rng.uniform(-max_off, max_off) * np.array([-d[1], d[0]])
        px = np.rint(p).astype(int)
        if 0 <= px[0] < cam.width and 0 <= px[1] < cam.height:
            out.append((pose, px))
    return out


def match_all(instances, cfg=None):
    """Run match_event over instances; returns matched rows plus M, V, S."""
    from evmarker.events import Event
    from evmarker.tracker import TrackerConfig, TrackerState, match_event
    cfg = cfg or TrackerConfig()
    rows = []
    for pose, px in instances:
        st = TrackerState.initial(pose)
        m = match_event(st, MODEL, CAM, Event(int(px[0]), int(px[1]), 0, 1), cfg)
        if m is None:
            continue
        Vc = pose.transform(MODEL.vertices)
        V = Vc[m.segment_index]
        S = Vc[(m.segment_index + 1) % 4] - V
        rows.append((m, m.direction, V, S))
    return rows


def edge_events(pose, n, rng, jitter=0.0, t0=0, dt=10, cam=CAM, model=MODEL):
    """Integer-pixel events sampled along the projected marker border."""
    from evmarker.core import project_point
    from evmarker.events import make_events
    uv = project_point(pose, cam, model.vertices)
    i = rng.integers(0, 4, n)
    s = rng.uniform(0.02, 0.98, n)
    p = uv[i] + s[:, None] * (uv[(i + 1) % 4] - uv[i]) + rng.normal(scale=jitter, size=(n, 2)) * (jitter > 0)
    p = np.clip(np.rint(p), 0, [cam.width - 1, cam.height - 1]).astype(int)
    return make_events(t0 + dt * np.arange(n), p[:, 0], p[:, 1], rng.choice([-1, 1], n))


def exit_trajectory():
    """Wander, slide out past the right edge, wait, come back."""
    P = lambda rv, T: Pose(exp_rotation(rv), T)
    return Trajectory([
        (0, P([0, 0, 0], [0, 0, 0.5])),
        (250_000, P([0.03, 0, 0.3], [0.03, 0.01, 0.5])),
        (450_000, P([0, 0, 0.3], [0.32, 0.01, 0.5])),
        (600_000, P([0, 0, 0.3], [0.32, 0.01, 0.5])),
        (850_000, P([0, 0.03, 0.0], [0.0, -0.01, 0.5])),
        (1_100_000, P([0.03, 0, -0.3], [-0.03, 0.02, 0.5])),
    ])


@lru_cache(maxsize=None)
def exit_scene():
    return simulate(exit_trajectory(), MODEL, CAM)


@lru_cache(maxsize=None)
def handoff_scene():
    """400 ms with enough early travel (~70 px) for a detection near 0.3 s."""
    P = lambda rv, T: Pose(exp_rotation(rv), T)
    traj = Trajectory([(0, P([0, 0, 0.1], [-0.03, -0.01, 0.5])),
                       (200_000, P([0.03, 0, 0.3], [0.03, 0.02, 0.5])),
                       (400_000, P([0, 0.04, 0.2], [0.0, 0.03, 0.52]))])
    return simulate(traj, MODEL, CAM)
