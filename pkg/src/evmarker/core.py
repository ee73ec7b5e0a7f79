"""Geometry shared by every stage: poses, the pinhole camera, the marker model
and lines of sight through event pixels.

Units are meters, radians and microseconds throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "BehindCameraError",
    "DegenerateMatrixError",
    "Pose",
    "CameraIntrinsics",
    "MarkerModel",
    "LineOfSight",
    "project_point",
    "line_of_sight",
    "exp_rotation",
    "log_rotation",
    "reorthonormalize",
    "skew",
    "load_intrinsics",
]


class BehindCameraError(ValueError):
    """A point was projected with non-positive depth."""


class DegenerateMatrixError(ValueError):
    """A matrix is too close to singular to be turned into a rotation."""


def _frozen(a, shape) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(shape)
    a.flags.writeable = False
    return a


def skew(v) -> np.ndarray:
    """Cross-product matrix, ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_rotation(r) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``r`` (Rodrigues' formula).

    Returns the identity exactly for ``|r| < 1e-12`` and uses the second order
    Taylor expansion below ``1e-8``.
    """
    r = np.asarray(r, dtype=float)
    theta = float(np.sqrt(r @ r))
    if theta < 1e-12:
        return np.eye(3)
    k = skew(r)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def log_rotation(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(c))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        S = 0.5 * (R + np.eye(3))
        i = int(np.argmax(np.diag(S)))
        axis = S[:, i] / np.sqrt(max(S[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def reorthonormalize(m) -> np.ndarray:
    """Nearest rotation matrix to ``m`` in the Frobenius sense (polar factor)."""
    m = np.asarray(m, dtype=float)
    U, s, Vt = np.linalg.svd(m)
    if s[-1] <= 1e-9 * s[0]:
        raise DegenerateMatrixError(f"matrix is rank deficient (singular values {s})")
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking marker-frame points into the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "Pose":
        return cls(exp_rotation(rotvec), translation)

    def transform(self, points) -> np.ndarray:
        """Apply the pose to one point ``(3,)`` or many ``(N, 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def rotvec(self) -> np.ndarray:
        return log_rotation(self.rotation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        rv = np.round(self.rotvec(), 5).tolist()
        t = np.round(self.translation, 5).tolist()
        return f"Pose(rotvec={rv}, translation={t})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie on the sensor")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_file(cls, path) -> "CameraIntrinsics":
        return load_intrinsics(path)

    def to_file(self, path) -> None:
        lines = [f"{k} = {getattr(self, k)}" for k in ("fx", "fy", "cx", "cy", "width", "height")]
        Path(path).write_text("\n".join(lines) + "\n")


def load_intrinsics(path) -> CameraIntrinsics:
    """Read ``key = value`` lines (fx, fy, cx, cy, width, height).

    Blank lines and ``#`` comments are ignored.
    """
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - values.keys()
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")
    return CameraIntrinsics(
        fx=float(values["fx"]), fy=float(values["fy"]),
        cx=float(values["cx"]), cy=float(values["cy"]),
        width=int(values["width"]), height=int(values["height"]),
    )


# Vertex order: top-left, top-right, bottom-right, bottom-left with the image
# y axis pointing down. This has positive signed area in pixel coordinates.
_UNIT_SQUARE = np.array([[-1.0, -1.0, 0.0],
                         [1.0, -1.0, 0.0],
                         [1.0, 1.0, 0.0],
                         [-1.0, 1.0, 0.0]])


@dataclass(frozen=True)
class MarkerModel:
    """Square binary marker centred on its frame origin, lying in Z = 0.

    ``bit_grid`` is the payload (1 = white cell) without the one-cell black
    border. Segment ``k`` runs from vertex ``k`` to vertex ``k + 1 (mod 4)``.
    """

    id: int
    side: float
    bit_grid: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.uint8))

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("marker side must be positive")
        grid = np.array(self.bit_grid, dtype=np.uint8)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError("bit_grid must be square")
        grid.flags.writeable = False
        object.__setattr__(self, "bit_grid", grid)

    @property
    def vertices(self) -> np.ndarray:
        return 0.5 * self.side * _UNIT_SQUARE

    @property
    def segments(self) -> np.ndarray:
        return np.array([[0, 1], [1, 2], [2, 3], [3, 0]])

    @property
    def cells(self) -> int:
        """Cells per side including the black border."""
        return self.bit_grid.shape[0] + 2

    @property
    def cell_size(self) -> float:
        return self.side / self.cells

    def full_grid(self) -> np.ndarray:
        """Bit grid with the black border attached, row index along marker y."""
        return np.pad(self.bit_grid, 1, constant_values=0)


@dataclass(frozen=True)
class LineOfSight:
    """Ray from the optical centre through a pixel and its rank-1 projector."""

    direction: np.ndarray
    projector: np.ndarray


def project_point(pose: Pose, intrinsics: CameraIntrinsics, point) -> np.ndarray:
    """Pinhole projection of marker-frame point(s) to pixel coordinates.

    Accepts ``(3,)`` or ``(N, 3)`` and returns ``(2,)`` or ``(N, 2)``.
    """
    X = pose.transform(point)
    Z = X[..., 2]
    if np.any(Z <= 0):
        raise BehindCameraError("point has non-positive depth in the camera frame")
    u = intrinsics.fx * X[..., 0] / Z + intrinsics.cx
    v = intrinsics.fy * X[..., 1] / Z + intrinsics.cy
    return np.stack([u, v], axis=-1)


def line_of_sight(intrinsics: CameraIntrinsics, pixel) -> LineOfSight:
    u, v = float(pixel[0]), float(pixel[1])
    m = np.array([(u - intrinsics.cx) / intrinsics.fx,
                  (v - intrinsics.cy) / intrinsics.fy,
                  1.0])
    L = np.outer(m, m) / (m @ m)
    m.flags.writeable = False
    L.flags.writeable = False
    return LineOfSight(direction=m, projector=L)
