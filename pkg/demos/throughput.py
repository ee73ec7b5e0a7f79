"""Wall time against update interval n on a tiled recorded stream.

    python3 demos/throughput.py [n_events]
"""
import sys

from evmarker.pipeline import bench_throughput
from evmarker.scenes import bench_stream, demo_marker, desk_camera


def main(total=2_000_000):
    cam, model = desk_camera(), demo_marker()
    ev, pose = bench_stream(total, model, cam)
    rep = bench_throughput(ev, model, cam, pose, [1, 5, 10, 50, 100, 500], repeats=1)
    print(rep.table())


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2_000_000)
