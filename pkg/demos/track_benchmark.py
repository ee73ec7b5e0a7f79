"""Simulate the 1.6 s desk benchmark, track it through the pipeline and
print the error against ground truth.

    python3 demos/track_benchmark.py [out_dir]
"""
import sys

from evmarker.pipeline import PipelineConfig, run_pipeline, write_outputs
from evmarker.scenes import benchmark_trajectory, demo_marker, desk_camera, simulate
from evmarker.simulator import evaluate_tracking


def main(out=None):
    cam, model = desk_camera(), demo_marker()
    ev, truth = simulate(benchmark_trajectory(), model, cam)
    print(f"{len(ev)} events over {(ev['t'][-1] - ev['t'][0]) / 1e6:.2f} s")
    res = run_pipeline(ev, cam, PipelineConfig())
    for sp in res.spawns:
        print(f"marker {sp['marker_id']} detected, tracker started at t={sp['snapshot_t']} us")
    rep = evaluate_tracking(res.poses[model.id], truth)
    print(f"translation {rep.translation_mean_mm:.2f} +- {rep.translation_std_mm:.2f} mm "
          f"(max {rep.translation_max_mm:.1f}), rotation {rep.rotation_mean_rad:.3f} rad, "
          f"coverage {rep.coverage:.2f}")
    print(f"backtrack windows {len(res.reports)}, lost {sum(r.lost for r in res.reports)}")
    if out:
        for k, p in write_outputs(res, out).items():
            print(k, p)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
