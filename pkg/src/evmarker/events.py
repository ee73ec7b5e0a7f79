"""Event streams: in-memory layout, file formats, the spatiotemporal noise
filter and the last-polarity event frame the detector reads."""
from __future__ import annotations

import io
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numba
import numpy as np

__all__ = [
    "EVENT_DTYPE",
    "Event",
    "StreamOrderError",
    "EventParseError",
    "make_events",
    "NoiseFilterConfig",
    "NoiseFilter",
    "filter_event",
    "EventFrame",
    "FrameSnapshot",
    "apply_event",
    "read_events",
    "write_events",
    "iter_batches",
]

# In-memory layout. Columns are accessed separately by the jitted kernels.
EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")], align=True)

# On-disk `.evb` record: u64 t, u16 x, u16 y, i8 p, little endian, packed.
EVB_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
assert EVB_DTYPE.itemsize == 13

CSV_HEADER = "t_us,x,y,p"
_NEVER = np.iinfo(np.int64).min // 2


class StreamOrderError(ValueError):
    """Event timestamps went backwards."""


class EventParseError(ValueError):
    def __init__(self, message, line=None, offset=None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class Event(NamedTuple):
    x: int
    y: int
    t: int
    polarity: int


def make_events(t, x, y, p) -> np.ndarray:
    """Pack column arrays into an event array with :data:`EVENT_DTYPE`."""
    t = np.asarray(t)
    ev = np.zeros(t.shape[0], dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    return ev


def _as_events(e) -> np.ndarray:
    if isinstance(e, np.ndarray):
        return e
    if isinstance(e, Event):
        return make_events([e.t], [e.x], [e.y], [e.polarity])
    return make_events(*zip(*[(v.t, v.x, v.y, v.polarity) for v in e])) if e else np.empty(0, EVENT_DTYPE)


def iter_batches(events: np.ndarray, batch_size: int = 65536):
    for start in range(0, len(events), batch_size):
        yield events[start:start + batch_size]


# --------------------------------------------------------------------------
# noise filter

@dataclass(frozen=True)
class NoiseFilterConfig:
    time_constant: int = 2000
    neighborhood_radius: int = 1
    include_same_pixel: bool = True
    require_same_polarity: bool = False

    def __post_init__(self):
        if self.time_constant <= 0:
            raise ValueError("time_constant must be positive")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood_radius must be >= 1")


@numba.njit(cache=True, nogil=True)
def _filter_kernel(ts, xs, ys, ps, last_t, last_p, prev_t, tau, radius,
                   include_self, same_pol, keep):
    h, w = last_t.shape
    for k in range(ts.shape[0]):
        t = ts[k]
        if t < prev_t:
            return k
        prev_t = t
        x = np.int64(xs[k])
        y = np.int64(ys[k])
        p = ps[k]
        ok = False
        for yy in range(max(0, y - radius), min(h, y + radius + 1)):
            for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                if not include_self and xx == x and yy == y:
                    continue
                lt = last_t[yy, xx]
                if t - lt <= tau and (not same_pol or last_p[yy, xx] == p):
                    ok = True
                    break
            if ok:
                break
        keep[k] = ok
        last_t[y, x] = t
        last_p[y, x] = p
    return -1


class NoiseFilter:
    """Drops events with no neighbour activity within ``time_constant`` µs.

    Memory is a per-pixel last-timestamp array, so the decision is O(1) per
    event and depends only on earlier events.
    """

    def __init__(self, width: int, height: int, config: NoiseFilterConfig | None = None):
        self.config = config or NoiseFilterConfig()
        self.width, self.height = width, height
        self.last_t = np.full((height, width), _NEVER, dtype=np.int64)
        self.last_p = np.zeros((height, width), dtype=np.int8)
        self.prev_t = _NEVER

    def mask(self, events) -> np.ndarray:
        """Keep-mask for a timestamp-ordered batch; updates the memory."""
        ev = _as_events(events)
        keep = np.zeros(len(ev), dtype=np.bool_)
        if len(ev) == 0:
            return keep
        _check_bounds(ev, self.width, self.height)
        c = self.config
        bad = _filter_kernel(ev["t"], ev["x"], ev["y"], ev["p"], self.last_t, self.last_p,
                             self.prev_t, c.time_constant, c.neighborhood_radius,
                             c.include_same_pixel, c.require_same_polarity, keep)
        if bad >= 0:
            raise StreamOrderError(f"event {bad} has timestamp {ev['t'][bad]} before {self._t_before(ev, bad)}")
        self.prev_t = int(ev["t"][-1])
        return keep

    def _t_before(self, ev, k):
        return int(ev["t"][k - 1]) if k > 0 else self.prev_t

    def __call__(self, events) -> np.ndarray:
        ev = _as_events(events)
        return ev[self.mask(ev)]


def filter_event(state: NoiseFilter, e: Event, cfg: NoiseFilterConfig | None = None) -> bool:
    """Keep/drop decision for a single event. ``state`` is updated either way."""
    if cfg is not None and cfg != state.config:
        state.config = cfg
    return bool(state.mask(e)[0])


# --------------------------------------------------------------------------
# event frame

def _check_bounds(ev, width, height):
    if len(ev) and (int(ev["x"].max()) >= width or int(ev["y"].max()) >= height):
        bad = int(np.flatnonzero((ev["x"] >= width) | (ev["y"] >= height))[0])
        raise IndexError(f"event ({ev['x'][bad]}, {ev['y'][bad]}) outside {width}x{height} sensor")


@numba.njit(cache=True, nogil=True)
def _apply_kernel(xs, ys, ts, ps, pol, last_t):
    for k in range(xs.shape[0]):
        pol[ys[k], xs[k]] = ps[k]
        last_t[ys[k], xs[k]] = ts[k]


@dataclass(frozen=True)
class FrameSnapshot:
    """Point-in-time copy of an :class:`EventFrame` (0 means no event yet)."""

    polarity: np.ndarray
    timestamp: int

    @property
    def width(self):
        return self.polarity.shape[1]

    @property
    def height(self):
        return self.polarity.shape[0]


class EventFrame:
    """Per-pixel polarity of the most recent event.

    Single writer; :meth:`snapshot` may be called from other threads.
    """

    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.polarity = np.zeros((height, width), dtype=np.int8)
        self.last_t = np.full((height, width), _NEVER, dtype=np.int64)
        self.last_update = _NEVER
        self._lock = threading.Lock()

    def apply(self, events) -> "EventFrame":
        ev = _as_events(events)
        if len(ev) == 0:
            return self
        _check_bounds(ev, self.width, self.height)
        with self._lock:
            _apply_kernel(ev["x"], ev["y"], ev["t"], ev["p"], self.polarity, self.last_t)
            self.last_update = max(self.last_update, int(ev["t"].max()))
        return self

    def snapshot(self, max_age: int | None = None) -> FrameSnapshot:
        """Copy of the frame. With ``max_age`` (µs) pixels whose last event is
        older than that, relative to the newest event, read as 0."""
        with self._lock:
            pol = self.polarity.copy()
            t = self.last_update
            if max_age is not None:
                pol[self.last_t < t - max_age] = 0
        pol.flags.writeable = False
        return FrameSnapshot(pol, int(t))

    def __getitem__(self, xy):
        x, y = xy
        return int(self.polarity[y, x])


def apply_event(frame: EventFrame, e) -> EventFrame:
    return frame.apply(e)


# --------------------------------------------------------------------------
# file formats

def _format_of(path, fmt):
    if fmt is not None:
        return fmt.lstrip(".").lower()
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix not in ("csv", "evb"):
        raise ValueError(f"cannot infer event format from {path!r}; pass format='csv' or 'evb'")
    return suffix


def write_events(events: np.ndarray, path, format: str | None = None) -> None:
    fmt = _format_of(path, format)
    ev = _as_events(events)
    if fmt == "evb":
        out = np.empty(len(ev), dtype=EVB_DTYPE)
        for name in ("t", "x", "y", "p"):
            out[name] = ev[name]
        out.tofile(path)
        return
    cols = np.column_stack([ev["t"], ev["x"], ev["y"], (ev["p"] > 0).astype(np.int64)])
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        if len(cols):
            np.savetxt(fh, cols, fmt="%d", delimiter=",")


def _check_order(t, where="event"):
    if len(t) > 1:
        d = np.diff(t)
        if np.any(d < 0):
            k = int(np.flatnonzero(d < 0)[0]) + 1
            raise StreamOrderError(f"{where} {k}: timestamp {t[k]} precedes {t[k - 1]}")


def _locate_csv_error(data: bytes):
    offset = 0
    for lineno, line in enumerate(io.BytesIO(data), 1):
        text = line.decode("ascii", errors="replace").strip()
        if lineno == 1 and text.replace(" ", "") == CSV_HEADER:
            offset += len(line)
            continue
        if text:
            parts = text.split(",")
            try:
                if len(parts) != 4:
                    raise ValueError(f"expected 4 fields, got {len(parts)}")
                vals = [int(s) for s in parts]
                if vals[3] not in (0, 1):
                    raise ValueError(f"polarity must be 0 or 1, got {vals[3]}")
                if vals[0] < 0 or vals[1] < 0 or vals[2] < 0:
                    raise ValueError("negative field")
            except ValueError as exc:
                raise EventParseError(
                    f"malformed event record at line {lineno} (byte offset {offset}): {exc}",
                    line=lineno, offset=offset) from None
        offset += len(line)
    raise EventParseError("malformed event file")


def read_events(path, format: str | None = None, width: int | None = None,
                height: int | None = None) -> np.ndarray:
    """Load an event file. Optional sensor size enables a bounds check."""
    fmt = _format_of(path, format)
    if fmt == "evb":
        raw = Path(path).read_bytes()
        rem = len(raw) % EVB_DTYPE.itemsize
        if rem:
            off = len(raw) - rem
            raise EventParseError(
                f"truncated record at byte offset {off} ({rem} of {EVB_DTYPE.itemsize} bytes)",
                offset=off)
        rec = np.frombuffer(raw, dtype=EVB_DTYPE)
        if len(rec) and not np.all((rec["p"] == 1) | (rec["p"] == -1)):
            k = int(np.flatnonzero((rec["p"] != 1) & (rec["p"] != -1))[0])
            raise EventParseError(f"record {k} (byte offset {k * 13}): polarity must be +-1",
                                  offset=k * 13)
        ev = make_events(rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])
    else:
        data = Path(path).read_bytes()
        if not data.partition(b"\n")[2].strip():
            return np.empty(0, dtype=EVENT_DTYPE)
        try:
            arr = np.loadtxt(io.BytesIO(data), delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        except ValueError:
            _locate_csv_error(data)
            raise
        if arr.size == 0:
            return np.empty(0, dtype=EVENT_DTYPE)
        if arr.shape[1] != 4 or np.any(arr < 0) or np.any(arr[:, 3] > 1):
            _locate_csv_error(data)
        ev = make_events(arr[:, 0], arr[:, 1], arr[:, 2], np.where(arr[:, 3] > 0, 1, -1))
    _check_order(ev["t"])
    if width is not None and height is not None:
        _check_bounds(ev, width, height)
    return ev
