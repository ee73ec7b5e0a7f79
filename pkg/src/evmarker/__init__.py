"""Event-by-event 6-DOF tracking of square fiducial markers with an event camera."""
from .core import (BehindCameraError, CameraIntrinsics, DegenerateMatrixError, LineOfSight,
                   MarkerModel, Pose, exp_rotation, line_of_sight, load_intrinsics, log_rotation,
                   project_point, reorthonormalize, skew)
from .events import (EVENT_DTYPE, EventFrame, EventParseError, FrameSnapshot, NoiseFilter,
                     NoiseFilterConfig, StreamOrderError, make_events, read_events, write_events)
from .detector import (Detection, DetectorConfig, MarkerDictionary, NoPoseError, default_dictionary,
                       detect_markers, load_dictionary, solve_pnp)
from .tracker import PoseSamples, Tracker, TrackerConfig, match_event
from .backtracker import BacktrackConfig, BacktrackReport, backtrack_window
from .simulator import SimConfig, Trajectory, evaluate_tracking, generate_events
from .pipeline import (PipelineConfig, bench_throughput, load_config, measure_latency,
                       run_pipeline, write_outputs)

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "CameraIntrinsics", "DegenerateMatrixError", "LineOfSight", "MarkerModel",
    "Pose", "exp_rotation", "line_of_sight", "load_intrinsics", "log_rotation", "project_point",
    "reorthonormalize", "skew",
    "EVENT_DTYPE", "EventFrame", "EventParseError", "FrameSnapshot", "NoiseFilter",
    "NoiseFilterConfig", "StreamOrderError", "make_events", "read_events", "write_events",
    "Detection", "DetectorConfig", "MarkerDictionary", "NoPoseError", "default_dictionary",
    "detect_markers", "load_dictionary", "solve_pnp",
    "PoseSamples", "Tracker", "TrackerConfig", "match_event",
    "BacktrackConfig", "BacktrackReport", "backtrack_window",
    "SimConfig", "Trajectory", "evaluate_tracking", "generate_events",
    "PipelineConfig", "bench_throughput", "load_config", "measure_latency", "run_pipeline",
    "write_outputs",
]
