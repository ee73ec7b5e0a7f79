"""Detection rate over random marker poses, each reached by a short
simulated approach so the event frame is painted.

    python3 demos/detect_sweep.py [n_poses]
"""
import sys

import numpy as np

from evmarker.detector import DetectorConfig, default_dictionary, detect_markers
from evmarker.scenes import demo_marker, desk_camera, detection_poses, sweep_frame


def main(n=50):
    cam, model, dic = desk_camera(), demo_marker(), default_dictionary()
    cfg = DetectorConfig(hamming_budget=0)
    rng = np.random.default_rng(1)
    hit = wrong = 0
    for i, pose in enumerate(detection_poses(n, seed=0)):
        dets = detect_markers(sweep_frame(pose, rng, model, cam, seed=i), dic, cam, cfg)
        ok = [d for d in dets if d.id == model.id]
        hit += bool(ok)
        wrong += len(dets) - len(ok)
        if ok:
            err = 1e3 * np.linalg.norm(ok[0].pose.translation - pose.translation)
            print(f"{i:3d} z={pose.translation[2]:.2f} m  id {model.id}  pnp error {err:.1f} mm")
        else:
            print(f"{i:3d} z={pose.translation[2]:.2f} m  missed")
    print(f"detected {hit}/{n}, wrong ids {wrong}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 50)
