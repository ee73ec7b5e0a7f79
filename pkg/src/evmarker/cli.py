"""Command line entry point: ``python3 -m evmarker <command> ...``.

Exit codes: 0 success, 1 I/O or config error, 2 no marker ever detected
(``track`` only).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import load_intrinsics
from .detector import default_dictionary, detect_markers, load_dictionary
from .events import EventFrame, EventParseError, StreamOrderError, read_events, write_events
from .pipeline import bench_throughput, load_config, measure_latency, run_pipeline, write_outputs
from .simulator import (SimConfig, evaluate_tracking, generate_events, read_poses, read_trajectory,
                        write_poses)

log = logging.getLogger("evmarker")

EXIT_OK, EXIT_IO, EXIT_NO_MARKER = 0, 1, 2


class _UsageError(Exception):
    pass


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise _UsageError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _dictionary(path):
    return load_dictionary(path) if path else default_dictionary()


def _json_out(obj, path):
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# --------------------------------------------------------------------------
# commands

def cmd_track(a) -> int:
    intr = load_intrinsics(a.intrinsics)
    cfg = load_config(a.config, _overrides(a.set))
    if a.single:
        import dataclasses
        cfg = dataclasses.replace(cfg, concurrent=False)
    events = read_events(a.events, width=intr.width, height=intr.height)
    res = run_pipeline(events, intr, cfg, _dictionary(a.dictionary))
    paths = write_outputs(res, a.out)
    for mid, s in sorted(res.poses.items()):
        log.info("marker %d: %d pose samples", mid, len(s))
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    if not res.spawns:
        print("no marker detected", file=sys.stderr)
        return EXIT_NO_MARKER
    return EXIT_OK


def cmd_simulate(a) -> int:
    intr = load_intrinsics(a.intrinsics)
    traj = read_trajectory(a.trajectory)
    model = _dictionary(a.dictionary).model(a.marker_id, a.side)
    cfg = SimConfig(contrast_threshold=a.threshold, noise_rate=a.noise, seed=a.seed)
    ev, truth = generate_events(traj, model, intr, cfg)
    write_events(ev, a.out)
    write_poses(truth, a.truth)
    log.info("%d events over %.3f s", len(ev), (traj.end - traj.start) * 1e-6)
    return EXIT_OK


def cmd_detect(a) -> int:
    intr = load_intrinsics(a.intrinsics)
    cfg = load_config(a.config, _overrides(a.set))
    ev = read_events(a.events, width=intr.width, height=intr.height)
    ev = ev[ev["t"] <= a.at]
    frame = EventFrame(intr.width, intr.height).apply(ev)
    dets = detect_markers(frame.snapshot(cfg.frame_max_age), _dictionary(a.dictionary), intr,
                          cfg.detector)
    out = []
    for d in dets:
        out.append(dict(id=d.id, corners=np.asarray(d.corners).tolist(), rms_px=d.rms,
                        translation=d.pose.translation.tolist(),
                        rotvec=d.pose.rotvec().tolist(), timestamp_us=d.timestamp))
    _json_out(out, a.json)
    return EXIT_OK


def cmd_evaluate(a) -> int:
    rep = evaluate_tracking(read_poses(a.est), read_poses(a.truth))
    _json_out(rep.summary(), a.json)
    return EXIT_OK


def _rates(text):
    try:
        r = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise _UsageError(f"--rates expects comma separated integers, got {text!r}") from None
    if not r or min(r) < 1:
        raise _UsageError("--rates needs positive integers")
    return r


def cmd_bench(a) -> int:
    from .scenes import bench_stream, demo_marker, desk_camera
    rates = _rates(a.rates)
    cam = load_intrinsics(a.intrinsics) if a.intrinsics else desk_camera()
    model = demo_marker()
    if a.events:
        if a.pose is None:
            raise _UsageError("--events needs --pose (a one-row pose CSV) for the start pose")
        ev = read_events(a.events, width=cam.width, height=cam.height)
        pose = read_poses(a.pose).pose(0)
    else:
        ev, pose = bench_stream(a.count, model, cam)
    rep = bench_throughput(ev, model, cam, pose, rates, repeats=a.repeats,
                           gain_ref=None if a.raw_gains else 100)
    print(rep.table())
    if a.json:
        rows = [dict(n=r.n, wall_s=r.wall_s, mev_per_s=r.mev_per_s, updates=r.updates,
                     update_rate_hz=r.update_rate_hz, realtime=r.realtime,
                     matched_frac=r.matched_frac) for r in rep.rows]
        Path(a.json).write_text(json.dumps(dict(
            rows=rows, max_realtime_update_rate_hz=rep.max_realtime_update_rate_hz,
            crossover_n=rep.crossover_n), indent=2) + "\n")
    return EXIT_OK


def cmd_latency(a) -> int:
    from .scenes import benchmark_trajectory, desk_camera, simulate
    cam = desk_camera()
    if a.events:
        cam = load_intrinsics(a.intrinsics) if a.intrinsics else cam
        ev = read_events(a.events, width=cam.width, height=cam.height)
    else:
        ev, _ = simulate(benchmark_trajectory(), cam=cam)
    rep = measure_latency(ev, cam, event_rate=a.rate * 1e6)
    _json_out(rep.summary(), a.json)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evmarker", description="Event-camera fiducial marker tracking.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, intrinsics_required=True):
        sp.add_argument("--intrinsics", required=intrinsics_required, help="camera intrinsics file")
        sp.add_argument("--dictionary", help="marker dictionary file (default: built-in 16 codes)")

    sp = sub.add_parser("track", help="run the full pipeline on an event file")
    sp.add_argument("events")
    common(sp)
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                    help="override a config value (repeatable)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--single", action="store_true", help="deterministic single-context mode")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("simulate", help="render events for a pose trajectory")
    sp.add_argument("trajectory", help="trajectory CSV (t_us,tx,ty,tz,qw,qx,qy,qz)")
    common(sp)
    sp.add_argument("--out", required=True, help="events file (.csv or .evb)")
    sp.add_argument("--truth", required=True, help="ground truth pose CSV")
    sp.add_argument("--marker-id", type=int, default=7)
    sp.add_argument("--side", type=float, default=0.1, help="marker side in metres")
    sp.add_argument("--threshold", type=float, default=0.2, help="contrast threshold")
    sp.add_argument("--noise", type=float, default=0.1, help="noise events per pixel per second")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("detect", help="one-shot detection on the event frame at a time")
    sp.add_argument("events")
    common(sp)
    sp.add_argument("--at", type=int, required=True, help="timestamp in µs")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    sp.add_argument("--json", help="also write the result here")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("evaluate", help="compare estimated poses with ground truth")
    sp.add_argument("--est", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="tracker throughput against the update interval n")
    sp.add_argument("--rates", default="1,5,10,50,100,500")
    sp.add_argument("--events", help="recorded stream (default: synthetic 10^7 events)")
    sp.add_argument("--pose", help="start pose CSV for --events")
    sp.add_argument("--intrinsics")
    sp.add_argument("--count", type=int, default=10_000_000)
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--raw-gains", action="store_true",
                    help="use the configured step sizes for every n (small n may diverge)")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("latency", help="pose latency through the threaded pipeline")
    sp.add_argument("--events")
    sp.add_argument("--intrinsics")
    sp.add_argument("--rate", type=float, default=1.0, help="replay rate in MEv/s")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_latency)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return a.func(a)
    except (OSError, EventParseError, StreamOrderError, ValueError, KeyError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
