import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evmarker.core import Pose, exp_rotation, line_of_sight, project_point
from evmarker.events import Event, make_events
from evmarker.tracker import (MatchResult, PoseSamples, Tracker, TrackerConfig, TrackerState,
                              accumulate, apply_update, match_event, process_events)

from helpers import (CAM, MODEL, edge_events, fronto_pose, grid_alpha, match_all,
                     near_edge_instances, short_scene, skew_lines_alpha)

CFG = TrackerConfig()
# fronto-parallel at 0.5 m: border on the pixel lines x = 260, 380 and y = 180, 300
ALIGNED = fronto_pose(0.5)


def reproj(pose_a, pose_b):
    a = project_point(pose_a, CAM, MODEL.vertices)
    b = project_point(pose_b, CAM, MODEL.vertices)
    return float(np.linalg.norm(a - b, axis=1).mean())


# ---- config

@pytest.mark.parametrize("kw", [dict(w0=0), dict(w0=1.5), dict(lambda_t=0), dict(lambda_r=-1),
                                dict(update_every_n=0), dict(match_threshold=0),
                                dict(torque_units="x"), dict(torque_lever="x")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrackerConfig(**kw)


def test_defaults():
    assert (CFG.w0, CFG.lambda_t, CFG.lambda_r, CFG.update_every_n, CFG.match_threshold) == \
        (0.1, 1.4, 0.003, 100, 2.0)


# ---- matching

def test_match_on_edge_midpoint():
    st_ = TrackerState.initial(ALIGNED)
    m = match_event(st_, MODEL, CAM, Event(320, 180, 0, 1), CFG)
    assert m.segment_index == 0
    assert m.distance == pytest.approx(0.0, abs=1e-12)
    assert m.alpha2 == pytest.approx(0.5, abs=1e-9)
    assert np.allclose(m.f_point, m.e_point, atol=1e-12)


def test_match_rejects_far_event():
    st_ = TrackerState.initial(ALIGNED)
    assert match_event(st_, MODEL, CAM, Event(320, 177, 0, 1), CFG) is None
    assert match_event(st_, MODEL, CAM, Event(320, 183, 0, 1), CFG) is None
    assert match_event(st_, MODEL, CAM, Event(320, 182, 0, 1), CFG) is not None


def test_match_clamps_to_segment_extent():
    st_ = TrackerState.initial(ALIGNED)
    # on the infinite line of the top edge but 10 px beyond its end
    assert match_event(st_, MODEL, CAM, Event(390, 180, 0, 1), CFG) is None


def test_match_tie_lowest_index():
    st_ = TrackerState.initial(ALIGNED)
    # the top-left corner pixel is 0 px from segments 3 and 0
    assert match_event(st_, MODEL, CAM, Event(260, 180, 0, 1), CFG).segment_index == 0


def test_match_vs_grid_oracle():
    rng = np.random.default_rng(0)
    rows = match_all(near_edge_instances(rng, 1000))
    assert len(rows) >= 990
    M = np.array([r[1] for r in rows])
    V = np.array([r[2] for r in rows])
    S = np.array([r[3] for r in rows])
    got = np.array([[r[0].alpha1, r[0].alpha2] for r in rows])
    ref = grid_alpha(M, V, S)
    assert np.max(np.abs(got - ref) / np.abs(ref)) <= 1e-6


def test_match_vs_closed_form():
    rng = np.random.default_rng(1)
    rows = match_all(near_edge_instances(rng, 10_000))
    M = np.array([r[1] for r in rows])
    V = np.array([r[2] for r in rows])
    S = np.array([r[3] for r in rows])
    got = np.array([[r[0].alpha1, r[0].alpha2] for r in rows])
    ref = skew_lines_alpha(M, V, S)
    assert np.max(np.abs(got - ref) / np.abs(ref)) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_perpendicularity(seed):
    rng = np.random.default_rng(seed)
    (m, M, V, S), = match_all(near_edge_instances(rng, 1)) or [(None,) * 4]
    if m is None:
        return
    r = m.e_point - m.f_point
    assert abs(r @ M) <= 1e-9
    assert abs(r @ S) <= 1e-9
    assert m.distance <= CFG.match_threshold


# ---- accumulation

def _match(direction, e_point, gain=1.0):
    d = np.asarray(direction, float)
    e = np.asarray(e_point, float)
    f = (d @ e) / (d @ d) * d
    return MatchResult(0, 0.0, float((d @ e) / (d @ d)), 0.5, f, e, d, gain)


def test_first_event_w0_one():
    cfg = TrackerConfig(w0=1.0)
    st_ = TrackerState.initial(ALIGNED)
    los = line_of_sight(CAM, [400, 300])
    E = np.array([0.05, 0.05, 0.5])
    s = accumulate(st_, _match(los.direction, E), cfg)
    L = los.projector
    assert np.allclose(s.acc_a, np.eye(3) - L, atol=1e-15)
    assert np.allclose(s.acc_b, (L - np.eye(3)) @ E, atol=1e-15)
    assert s.events_since_update == 1


def test_point_on_ray_zero_residual():
    s = accumulate(TrackerState.initial(ALIGNED), _match([0, 0, 1], [0, 0, 1]), TrackerConfig(w0=1.0))
    assert np.allclose(s.acc_b, 0)
    assert np.allclose(s.acc_torque, 0)


def test_blend_geometric_convergence():
    cfg = TrackerConfig(w0=0.1)
    m = _match(line_of_sight(CAM, [350, 200]).direction, [0.02, -0.03, 0.5])
    target = accumulate(TrackerState.initial(ALIGNED), m, TrackerConfig(w0=1.0))
    s = TrackerState.initial(ALIGNED)
    gaps = []
    for _ in range(30):
        s = accumulate(s, m, cfg)
        gaps.append(np.linalg.norm(s.acc_b - target.acc_b))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.allclose(ratios, 0.9, atol=1e-9)
    gA = [np.linalg.norm(s.acc_a - target.acc_a)]
    s = accumulate(s, m, cfg)
    assert np.linalg.norm(s.acc_a - target.acc_a) == pytest.approx(0.9 * gA[0], rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_acc_a_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    s = TrackerState.initial(ALIGNED)
    for _ in range(20):
        d = line_of_sight(CAM, rng.uniform(0, 640, 2)).direction
        s = accumulate(s, _match(d, rng.uniform(-0.1, 0.1, 3) + [0, 0, 0.5]), CFG)
    assert np.allclose(s.acc_a, s.acc_a.T, atol=1e-15)
    assert np.linalg.eigvalsh(s.acc_a).min() >= -1e-12


# ---- updates

def test_zero_innovation_keeps_pose():
    s = apply_update(TrackerState.initial(ALIGNED), CFG)
    assert np.array_equal(s.translation, ALIGNED.translation)
    assert np.array_equal(s.rotation, ALIGNED.rotation)
    assert s.updates_done == 1 and s.events_since_update == 0


def test_ill_conditioned_update_skipped():
    cfg = TrackerConfig(w0=1.0)
    s = accumulate(TrackerState.initial(ALIGNED), _match([0, 0, 1], [0.01, 0, 0.5]), cfg)
    s2 = apply_update(s, cfg)
    assert s2.skipped_updates == 1 and s2.updates_done == 0
    assert np.array_equal(s2.translation, s.translation)
    assert s2.events_since_update == 0



def _corner_shift(a, b):
    return np.linalg.norm(project_point(a.pose, CAM, MODEL.vertices)
                          - project_point(b.pose, CAM, MODEL.vertices), axis=1).max()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 3.0))
def test_step_cap_bounds_corner_motion(seed, cap):
    rng = np.random.default_rng(seed)
    cfg = TrackerConfig(max_step_px=cap)
    s = TrackerState.initial(ALIGNED)
    for _ in range(10):
        d = line_of_sight(CAM, rng.uniform(200, 440, 2)).direction
        s = accumulate(s, _match(d, rng.uniform(-0.05, 0.05, 3) + [0, 0, 0.5]), cfg)
    free = apply_update(s, dataclasses.replace(cfg, max_step_px=None), MODEL, CAM)
    capped = apply_update(s, cfg, MODEL, CAM)
    assert _corner_shift(s, capped) <= cap * 1.01
    step_free = free.translation - s.translation
    step = capped.translation - s.translation
    # same direction, never longer
    assert np.linalg.norm(step) <= np.linalg.norm(step_free) + 1e-15
    assert np.allclose(np.cross(step, step_free), 0, atol=1e-12)
    if _corner_shift(s, free) <= cap:
        assert np.array_equal(capped.translation, free.translation)


def test_step_cap_needs_geometry():
    s = accumulate(TrackerState.initial(ALIGNED),
                   _match(line_of_sight(CAM, [330, 250]).direction, [0.03, 0.0, 0.6]), TrackerConfig(w0=1.0))
    s = accumulate(s, _match(line_of_sight(CAM, [310, 235]).direction, [0.0, 0.03, 0.4]), TrackerConfig(w0=0.5))
    cfg = TrackerConfig(max_step_px=0.1)
    assert not np.array_equal(apply_update(s, cfg).translation, apply_update(s, cfg, MODEL, CAM).translation)
    with pytest.raises(ValueError):
        TrackerConfig(max_step_px=0.0)

def _two_mm(threshold):
    rng = np.random.default_rng(2)
    start = Pose(ALIGNED.rotation, ALIGNED.translation + [0.002, 0, 0])
    cfg = TrackerConfig(match_threshold=threshold)
    samples = Tracker(MODEL, CAM, start, cfg).process(edge_events(ALIGNED, 400, rng))
    assert len(samples) == 4
    return np.linalg.norm(samples.translation[3] - ALIGNED.translation)


def test_translation_convergence_2mm():
    # 2 mm is 2.4 px at 0.5 m; a 3 px gate lets the vertical edges in
    assert _two_mm(3.0) <= 0.5 * 0.002


@pytest.mark.xfail(strict=True, reason="2.4 px offset is outside the default 2 px gate for the "
                                       "edges that observe it")
def test_translation_convergence_2mm_default_gate():
    assert _two_mm(2.0) <= 0.5 * 0.002


def test_torque_direction_in_plane():
    rng = np.random.default_rng(3)
    truth = fronto_pose(0.5, spin=0.05)
    s = TrackerState.initial(ALIGNED)
    cfg = TrackerConfig(update_every_n=10**9)
    tr = Tracker(MODEL, CAM, s, cfg)
    tr.process(edge_events(truth, 200, rng))
    G = tr.state.acc_torque
    cos = G @ [0, 0, 1] / np.linalg.norm(G)
    assert np.degrees(np.arccos(cos)) <= 15


def test_zero_residual_fixed_point():
    ev = []
    for x in range(262, 379):
        ev += [(x, 180), (x, 300)]
    for y in range(182, 299):
        ev += [(260, y), (380, y)]
    ev = np.array(ev)
    order = np.random.default_rng(4).permutation(len(ev))[:400]
    events = make_events(np.arange(400), ev[order, 0], ev[order, 1], np.ones(400))
    s = TrackerState.initial(ALIGNED)
    tr = Tracker(MODEL, CAM, s, TrackerConfig(update_every_n=10**9))
    tr.process(events)
    st_ = tr.state
    step = np.linalg.solve(st_.acc_a, st_.acc_b)
    assert np.linalg.norm(step) <= 1e-6
    assert np.linalg.norm(st_.acc_torque) <= 1e-6
    tr2 = Tracker(MODEL, CAM, ALIGNED)
    tr2.process(events)
    assert np.linalg.norm(tr2.pose.translation - ALIGNED.translation) <= 1e-6


# ---- batches

def test_empty_batch():
    s0 = TrackerState.initial(ALIGNED)
    s1, samples = process_events(s0, MODEL, CAM, make_events([], [], [], []), CFG)
    assert len(samples) == 0
    assert np.array_equal(s1.translation, s0.translation) and s1.updates_done == 0


def test_250_matched_two_samples():
    rng = np.random.default_rng(5)
    ev = edge_events(ALIGNED, 250, rng)
    s, samples = process_events(TrackerState.initial(ALIGNED), MODEL, CAM, ev, CFG)
    assert len(samples) == 2
    assert s.matched == 250 and s.events_since_update == 50
    assert samples.t[0] == ev["t"][99] and samples.t[1] == ev["t"][199]


def test_unmatched_do_not_count():
    rng = np.random.default_rng(6)
    ev = edge_events(ALIGNED, 150, rng)
    far = make_events(np.arange(150) * 10 + 5, np.full(150, 20), np.full(150, 20), np.ones(150))
    mixed = np.sort(np.concatenate([ev, far]), order="t", kind="stable")
    s, samples = process_events(TrackerState.initial(ALIGNED), MODEL, CAM, mixed, CFG)
    assert len(samples) == 1 and s.discarded == 150
    s, samples = process_events(TrackerState.initial(ALIGNED), MODEL, CAM, mixed,
                                dataclasses.replace(CFG, count_unmatched=True))
    assert len(samples) == 3


def test_batch_split_invariance_and_determinism():
    ev, _ = short_scene()
    ev = ev[:200_000]
    whole = Tracker(MODEL, CAM, ALIGNED).process(ev)
    tr = Tracker(MODEL, CAM, ALIGNED)
    parts = PoseSamples.concatenate([tr.process(ev[i:i + 3331]) for i in range(0, len(ev), 3331)])
    assert np.array_equal(whole.t, parts.t)
    assert np.array_equal(whole.translation, parts.translation)
    assert np.array_equal(whole.rotation, parts.rotation)
    again = Tracker(MODEL, CAM, ALIGNED).process(ev)
    assert np.array_equal(whole.translation, again.translation)


def test_order_error():
    from evmarker.events import StreamOrderError
    with pytest.raises(StreamOrderError):
        process_events(TrackerState.initial(ALIGNED), MODEL, CAM,
                       make_events([5, 1], [320, 320], [180, 180], [1, 1]), CFG)


def _static_noise(filtered):
    from evmarker.events import NoiseFilter
    from evmarker.simulator import SimConfig, Trajectory
    from helpers import simulate
    ev, _ = simulate(Trajectory([(0, ALIGNED), (2_000_000, ALIGNED)]), MODEL, CAM, SimConfig(seed=1))
    assert len(ev) > 50_000
    if filtered:
        ev = NoiseFilter(CAM.width, CAM.height)(ev)
    samples = Tracker(MODEL, CAM, ALIGNED).process(ev)
    err = np.linalg.norm(samples.translation - ALIGNED.translation, axis=1)
    return len(samples), (err.max() if len(samples) else 0.0)


def test_static_scene_filtered_noise():
    n, err = _static_noise(True)
    assert err <= 1e-3


@pytest.mark.xfail(strict=True, reason="raw noise near the border drives updates with nothing "
                                       "to restore the pose")
def test_static_scene_raw_noise():
    n, err = _static_noise(False)
    assert err <= 1e-3


def test_static_jittered_edges_bounded():
    # 0.5 px jitter on every edge event: depth noise dominates and stays a few mm
    rng = np.random.default_rng(7)
    samples = Tracker(MODEL, CAM, ALIGNED).process(edge_events(ALIGNED, 20_000, rng, jitter=0.5))
    err = np.linalg.norm(samples.translation - ALIGNED.translation, axis=1)
    assert err.mean() <= 1.5e-3 and err.max() <= 5e-3
    lateral = np.abs(samples.translation[:, :2] - ALIGNED.translation[:2]).max()
    assert lateral <= 1e-3


def test_update_count_doubles_with_density():
    ev, _ = short_scene()
    ev = ev[:100_000]
    double = np.repeat(ev, 2)
    cfg = dataclasses.replace(CFG, count_unmatched=True)
    a = Tracker(MODEL, CAM, ALIGNED, cfg).process(ev)
    b = Tracker(MODEL, CAM, ALIGNED, cfg).process(double)
    assert abs(len(b) - 2 * len(a)) <= 1


def _basin(threshold, magnitude, k, trials=8):
    ev, truth = short_scene()
    rng = np.random.default_rng(8)
    cfg = TrackerConfig(match_threshold=threshold)
    worst = 0.0
    for _ in range(trials):
        d = rng.normal(size=2)
        d = magnitude * d / np.linalg.norm(d)
        start = Pose(exp_rotation([0, 0, rng.uniform(-0.01, 0.01)]),
                     ALIGNED.translation + [d[0] * 0.5 / 600, d[1] * 0.5 / 600, 0])
        s = Tracker(MODEL, CAM, start, cfg).process(ev[:200_000])
        assert len(s) > k
        i = np.searchsorted(truth.t, s.t[k])
        worst = max(worst, reproj(s.pose(k), truth.pose(i)))
    return worst


def test_convergence_basin_wide_gate():
    assert _basin(6.0, 5.0, 49) <= 1.0


def test_convergence_within_gate():
    assert _basin(2.0, 1.5, 49) <= 1.0


@pytest.mark.xfail(strict=True, reason="a 5 px offset leaves the edges parallel to it outside "
                                       "the 2 px gate, so those edges cannot pull the pose back")
def test_convergence_basin_5px_20_updates():
    assert _basin(2.0, 5.0, 19) <= 1.0


def test_behind_camera_status():
    tr = Tracker(MODEL, CAM, Pose(np.eye(3), [0, 0, -0.5]))
    tr.process(make_events([1], [320], [240], [1]))
    assert tr.lost_geometry
