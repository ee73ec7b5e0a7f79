"""Marker detection on event-frame snapshots and PnP pose initialisation.

Detection follows the usual square-marker chain: threshold the dark pixels,
trace contours, keep convex quadrilaterals, refine their corners to sub-pixel
precision, read the bit grid through the quad's homography and look the
payload up in a dictionary under all four rotations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .core import CameraIntrinsics, MarkerModel, Pose, exp_rotation, reorthonormalize, skew
from .events import EventFrame, FrameSnapshot

__all__ = [
    "NoPoseError",
    "MarkerDictionary",
    "DetectorConfig",
    "Detection",
    "default_dictionary",
    "load_dictionary",
    "detect_markers",
    "decode_payload",
    "solve_pnp",
    "reprojection_rms",
]


class NoPoseError(RuntimeError):
    """PnP could not produce an acceptable pose."""


# First 16 codes of the standard 4x4 ArUco dictionary, row-major, MSB first,
# 1 = white cell.
_ARUCO_4X4_FIRST16 = (
    0xB532, 0x0F9A, 0x332D, 0x9946, 0x549E, 0x79CD, 0x9E2E, 0xC4F2,
    0xFEDA, 0xCF56, 0xF991, 0x11A7, 0x0EB7, 0x2A0F, 0x24B1, 0x263E,
)


def _bits(value: int, n: int) -> np.ndarray:
    return np.array([(value >> (n * n - 1 - k)) & 1 for k in range(n * n)], dtype=np.uint8).reshape(n, n)


class MarkerDictionary:
    """Payload codes keyed by marker ID."""

    def __init__(self, codes: dict[int, np.ndarray]):
        if not codes:
            raise ValueError("dictionary is empty")
        grids = {int(k): np.array(v, dtype=np.uint8) for k, v in codes.items()}
        sizes = {g.shape for g in grids.values()}
        if len(sizes) != 1 or len(next(iter(sizes))) != 2 or next(iter(sizes))[0] != next(iter(sizes))[1]:
            raise ValueError("all payloads must be square and the same size")
        self.grid_size = next(iter(sizes))[0]
        self.ids = np.array(sorted(grids), dtype=np.int64)
        self.codes = np.stack([grids[i] for i in self.ids])
        # rotated[r][k] is code k as observed with its first vertex at corner r
        self.rotated = np.stack([np.rot90(self.codes, -r, axes=(1, 2)) for r in range(4)])
        flat = self.rotated.reshape(4, len(self.ids), -1)
        d = (flat[:, :, None, :] != flat[0][None, None, :, :]).sum(-1)  # (rot, a, b)
        same = np.eye(len(self.ids), dtype=bool)
        for k in range(len(self.ids)):
            if any((d[r, k, k] == 0) for r in range(1, 4)):
                raise ValueError(f"code {self.ids[k]} is rotationally symmetric")
        cross = np.where(same[None], np.iinfo(np.int64).max, d)
        self.min_distance = int(cross.min())
        if self.min_distance < 1:
            raise ValueError("two codes coincide under rotation")

    def __len__(self):
        return len(self.ids)

    def grid(self, marker_id: int) -> np.ndarray:
        k = int(np.flatnonzero(self.ids == marker_id)[0])
        return self.codes[k]

    def model(self, marker_id: int, side: float) -> MarkerModel:
        return MarkerModel(int(marker_id), side, self.grid(marker_id))

    def match(self, bits: np.ndarray):
        """Best ``(id, rotation, hamming)`` for an observed payload."""
        d = (self.rotated != bits[None, None]).sum(axis=(2, 3))  # (rot, code)
        r, k = np.unravel_index(int(np.argmin(d)), d.shape)
        return int(self.ids[k]), int(r), int(d[r, k])

    def to_file(self, path) -> None:
        n = self.grid_size
        width = (n * n + 3) // 4
        lines = []
        for i, g in zip(self.ids, self.codes):
            v = int("".join(map(str, g.flatten())), 2)
            lines.append(f"{i},{v:0{width}x}")
        Path(path).write_text("\n".join(lines) + "\n")


def default_dictionary() -> MarkerDictionary:
    return MarkerDictionary({i: _bits(v, 4) for i, v in enumerate(_ARUCO_4X4_FIRST16)})


def load_dictionary(path, grid_size: int = 4) -> MarkerDictionary:
    """Read ``id,hex_payload`` lines."""
    codes = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, hexval = (s.strip() for s in line.split(","))
            codes[int(key)] = _bits(int(hexval, 16), grid_size)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: expected 'id,hex_payload': {exc}") from None
    return MarkerDictionary(codes)


@dataclass(frozen=True)
class DetectorConfig:
    marker_side: float = 0.1
    marker_sides: dict = field(default_factory=dict)  # per-ID override
    hamming_budget: int = 0
    border_fraction: float = 0.7
    min_area: float = 100.0
    approx_accuracy: float = 0.03
    unpainted_pass: bool = True
    edge_offset: float = 0.625
    max_rms: float = 2.0
    cell_samples: int = 3

    def side(self, marker_id: int) -> float:
        return float(self.marker_sides.get(marker_id, self.marker_side))


@dataclass(frozen=True)
class Detection:
    id: int
    corners: np.ndarray
    pose: Pose
    timestamp: int
    rms: float = 0.0
    area: float = 0.0


# --------------------------------------------------------------------------
# geometry helpers

def _signed_area(q) -> float:
    x, y = q[:, 0], q[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _homography(src, dst) -> np.ndarray:
    """DLT homography mapping ``src`` (N, 2) to ``dst`` (N, 2)."""
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    _, _, Vt = np.linalg.svd(np.asarray(rows, dtype=float))
    H = Vt[-1].reshape(3, 3)
    return H / H[2, 2] if abs(H[2, 2]) > 1e-15 else H


def _apply_h(H, pts):
    p = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return p[:, :2] / p[:, 2:3]


# --------------------------------------------------------------------------
# payload decoding

def _polarity(frame) -> np.ndarray:
    if isinstance(frame, EventFrame):
        frame = frame.snapshot()
    if isinstance(frame, FrameSnapshot):
        return frame.polarity
    return np.asarray(frame)


def _sample_cells(pol, corners, cells, samples):
    """Sum of polarities over a ``samples``² lattice inside every cell.

    Returns (cells, cells) sums and counts of pixels carrying an event.
    """
    unit = np.array([[0, 0], [cells, 0], [cells, cells], [0, cells]], dtype=float)
    H = _homography(unit, corners)
    offs = (np.arange(samples) + 0.5) / samples * 0.6 + 0.2
    gy, gx = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    px = (gx[:, :, None, None] + ox[None, None]).ravel()
    py = (gy[:, :, None, None] + oy[None, None]).ravel()
    uv = _apply_h(H, np.column_stack([px, py]))
    u = np.rint(uv[:, 0]).astype(np.int64)
    v = np.rint(uv[:, 1]).astype(np.int64)
    h, w = pol.shape
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    val = np.zeros(len(u), dtype=np.int64)
    val[inside] = pol[v[inside], u[inside]]
    val = val.reshape(cells, cells, -1)
    return val.sum(-1), (val != 0).sum(-1)


def decode_payload(frame, corners, dictionary: MarkerDictionary,
                   config: DetectorConfig | None = None):
    """Read the bit grid inside ``corners`` and look it up.

    ``corners`` are four pixel points with positive signed area (image y
    down). Returns ``(id, rotation)`` where ``corners[rotation]`` is the
    marker's first vertex, or ``None`` when the border is not dark enough or
    no code is within the Hamming budget.
    """
    cfg = config or DetectorConfig()
    pol = _polarity(frame)
    q = np.asarray(corners, dtype=float)
    n = dictionary.grid_size
    cells = n + 2
    sums, counts = _sample_cells(pol, q, cells, cfg.cell_samples)
    dark = (sums < 0) & (counts > 0)
    ring = np.ones((cells, cells), dtype=bool)
    ring[1:-1, 1:-1] = False
    if dark[ring].mean() < cfg.border_fraction:
        return None
    inner = sums[1:-1, 1:-1]
    if np.any(counts[1:-1, 1:-1] == 0) or np.any(inner == 0):
        return None
    bits = (inner > 0).astype(np.uint8)
    mid, rot, dist = dictionary.match(bits)
    if dist > cfg.hamming_budget:
        return None
    return mid, rot


# --------------------------------------------------------------------------
# quad extraction

def _refine_corners(contour, idx, edge_offset):
    """Intersect lines fitted to the contour runs between approximate corners."""
    pts = contour.astype(float)
    m = len(pts)
    lines = []
    for k in range(4):
        a, b = idx[k], idx[(k + 1) % 4]
        run = pts[a:b + 1] if b > a else np.concatenate([pts[a:], pts[:b + 1]])
        trim = int(len(run) * 0.15)
        run = run[trim:len(run) - trim] if len(run) - 2 * trim >= 3 else run
        if len(run) < 2:
            return None
        c = run.mean(axis=0)
        _, _, Vt = np.linalg.svd(run - c)
        d = Vt[0]
        nrm = np.array([d[1], -d[0]])
        lines.append([c, d, nrm])
    centroid = pts.mean(axis=0)
    out = []
    for k in range(4):
        c, d, nrm = lines[k]
        if (c - centroid) @ nrm < 0:
            nrm = -nrm
        lines[k] = [c + edge_offset * nrm, d, nrm]
    for k in range(4):
        c1, d1, _ = lines[(k - 1) % 4]
        c2, d2, _ = lines[k]
        M = np.column_stack([d1, -d2])
        if abs(np.linalg.det(M)) < 1e-9:
            return None
        s = np.linalg.solve(M, c2 - c1)
        out.append(c1 + s[0] * d1)
    return np.array(out)


def _quads(pol, cfg: DetectorConfig):
    # dark-only first; then unpainted counted as dark, which closes gaps the
    # moving marker left inside its border (the white quiet zone still separates)
    yield from _mask_quads((pol < 0).astype(np.uint8), cfg, cfg.edge_offset, 0)
    if cfg.unpainted_pass:
        yield from _mask_quads((pol <= 0).astype(np.uint8), cfg, cfg.edge_offset, 1)


def _mask_quads(dark, cfg: DetectorConfig, edge_offset, tag):
    contours, _ = cv2.findContours(dark, cv2.RETR_CCOMP, cv2.CHAIN_APPROX_NONE)
    h, w = dark.shape
    for cnt in contours:
        if len(cnt) < 16:
            continue
        c2 = cnt[:, 0, :]
        if c2[:, 0].min() <= 0 or c2[:, 1].min() <= 0 or c2[:, 0].max() >= w - 1 or c2[:, 1].max() >= h - 1:
            continue
        approx = cv2.approxPolyDP(cnt, max(1.0, cfg.approx_accuracy * len(cnt)), True)
        if len(approx) != 4 or not cv2.isContourConvex(approx):
            continue
        area = abs(cv2.contourArea(approx))
        if area < cfg.min_area:
            continue
        # contour indices of the approximate corners, in contour order
        a = approx[:, 0, :]
        idx = [int(np.argmin(np.abs(c2 - p).sum(axis=1))) for p in a]
        order = np.argsort(idx)
        idx = [idx[i] for i in order]
        q = _refine_corners(c2, idx, edge_offset)
        if q is None:
            q = a[order].astype(float)
        if _signed_area(q) < 0:
            q = q[::-1]
        start = int(np.argmin(q.sum(axis=1)))
        q = np.roll(q, -start, axis=0)
        yield q, area, tag


def detect_markers(frame, dictionary: MarkerDictionary | None, intrinsics: CameraIntrinsics,
                   config: DetectorConfig | None = None, exclude_ids=()) -> list[Detection]:
    """Find dictionary markers in an event-frame snapshot.

    IDs in ``exclude_ids`` (markers already tracked) are skipped. When one ID
    shows up twice a dark-only quad beats one that needed unpainted pixels,
    then the larger quad wins.
    """
    cfg = config or DetectorConfig()
    dictionary = dictionary or default_dictionary()
    if isinstance(frame, EventFrame):
        frame = frame.snapshot()
    pol = _polarity(frame)
    stamp = frame.timestamp if isinstance(frame, FrameSnapshot) else 0
    exclude = set(int(i) for i in exclude_ids)
    best: dict[int, Detection] = {}
    found_dark = set()
    for q, area, tag in _quads(pol, cfg):
        dec = decode_payload(pol, q, dictionary, cfg)
        if dec is None:
            continue
        mid, rot = dec
        if mid in exclude or (tag and mid in found_dark):
            continue
        corners = np.roll(q, -rot, axis=0)
        model = dictionary.model(mid, cfg.side(mid))
        try:
            pose = solve_pnp(corners, model, intrinsics, max_rms=cfg.max_rms)
        except NoPoseError:
            continue
        det = Detection(mid, corners, pose, int(stamp),
                        reprojection_rms(pose, model, intrinsics, corners), float(area))
        if mid not in best or det.area > best[mid].area:
            best[mid] = det
        if not tag:
            found_dark.add(mid)
    return [best[k] for k in sorted(best)]


# --------------------------------------------------------------------------
# PnP

def reprojection_rms(pose: Pose, model: MarkerModel, intrinsics: CameraIntrinsics, corners) -> float:
    X = pose.transform(model.vertices)
    u = np.column_stack([intrinsics.fx * X[:, 0] / X[:, 2] + intrinsics.cx,
                         intrinsics.fy * X[:, 1] / X[:, 2] + intrinsics.cy])
    return float(np.sqrt(np.mean(np.sum((u - corners) ** 2, axis=1))))


def _residual_jacobian(R, T, P, uv, intr):
    X = P @ R.T + T
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    r = np.column_stack([u - uv[:, 0], v - uv[:, 1]]).ravel()
    J = np.zeros((2 * len(P), 6))
    for i in range(len(P)):
        dproj = np.array([[intr.fx / z[i], 0.0, -intr.fx * x[i] / z[i] ** 2],
                          [0.0, intr.fy / z[i], -intr.fy * y[i] / z[i] ** 2]])
        # left perturbation: d(exp(w) R p)/dw = -[R p]x
        J[2 * i:2 * i + 2, :3] = dproj @ (-skew(R @ P[i]))
        J[2 * i:2 * i + 2, 3:] = dproj
    return r, J


def solve_pnp(corners, model: MarkerModel, intrinsics: CameraIntrinsics,
              max_rms: float | None = 2.0, max_iter: int = 100) -> Pose:
    """Pose of ``model`` from its four image corners.

    Initialised from the plane homography, refined by Levenberg-Marquardt on
    the reprojection error (damping 1e-3 scaled by the diagonal, x10 on a
    rejected step and /10 on an accepted one, stop once the step is below
    1e-10 or after ``max_iter`` iterations).
    """
    uv = np.asarray(corners, dtype=float).reshape(-1, 2)
    P = model.vertices
    if len(uv) != len(P):
        raise NoPoseError("need one image point per model vertex")
    tri = [abs(_signed_area(uv[[i, (i + 1) % 4, (i + 2) % 4]])) for i in range(4)]
    scale = max(1.0, float(np.ptp(uv, axis=0).max()) ** 2)
    if min(tri) < 1e-6 * scale:
        raise NoPoseError("image points are (nearly) collinear")

    xn = np.column_stack([uv, np.ones(len(uv))]) @ intrinsics.K_inv.T
    H = _homography(P[:, :2], xn[:, :2])
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2, T = lam * h1, lam * h2, lam * h3
    try:
        R = reorthonormalize(np.column_stack([r1, r2, np.cross(r1, r2)]))
    except ValueError as exc:
        raise NoPoseError(str(exc)) from None

    r, J = _residual_jacobian(R, T, P, uv, intrinsics)
    cost = r @ r
    mu = 1e-3
    for _ in range(max_iter):
        JtJ = J.T @ J
        g = J.T @ r
        A = JtJ + mu * np.diag(np.maximum(np.diag(JtJ), 1e-12))
        try:
            step = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            mu *= 10
            continue
        R_new = exp_rotation(step[:3]) @ R
        T_new = T + step[3:]
        if np.any((P @ R_new.T + T_new)[:, 2] <= 0):
            mu *= 10
            continue
        r_new, J_new = _residual_jacobian(R_new, T_new, P, uv, intrinsics)
        c_new = r_new @ r_new
        if c_new <= cost:
            R, T, r, J, cost = R_new, T_new, r_new, J_new, c_new
            mu = max(mu / 10, 1e-15)
        else:
            mu *= 10
        if np.linalg.norm(step) < 1e-10 or mu > 1e15:
            break
    pose = Pose(reorthonormalize(R), T)
    if np.any(pose.transform(P)[:, 2] <= 0):
        raise NoPoseError("solution puts the marker behind the camera")
    rms = float(np.sqrt(cost / len(P)))
    if max_rms is not None and rms > max_rms:
        raise NoPoseError(f"reprojection RMS {rms:.3f} px exceeds {max_rms}")
    return pose
