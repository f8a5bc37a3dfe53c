"""Frames, rigid transforms, box projection and overlap measures.

Ego frame convention is LiDAR-style: x forward, y left, z up. Headings are
yaw angles about the vertical axis, normalized to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-6
_NEAR_PLANE = 1e-3


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if -math.pi < theta <= math.pi:
        return float(theta)
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def angle_diff(a: float, b: float) -> float:
    """Wrap-aware ``a - b``."""
    return wrap_angle(a - b)


@dataclass(frozen=True)
class RigidPose:
    """Maps ego-frame points to world-frame points: ``world = R @ ego + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        c, s = math.cos(yaw), math.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=float))

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def as_matrix(self) -> np.ndarray:
        """Row-major 3x4 ``[R|t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # (w, l, h)
    heading: float

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        dims = tuple(float(v) for v in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError("center and dims must have 3 components")
        if min(dims) <= 0.0:
            raise ValueError(f"box dims must be strictly positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    def corners(self) -> np.ndarray:
        """The 8 corners as an (8, 3) array; length runs along the heading."""
        w, l, h = self.dims
        xs = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (l / 2.0)
        ys = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (w / 2.0)
        zs = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (h / 2.0)
        c, s = math.cos(self.heading), math.sin(self.heading)
        pts = np.stack([c * xs - s * ys, s * xs + c * ys, zs], axis=1)
        return pts + np.asarray(self.center)


@dataclass(frozen=True)
class CameraProjection:
    """3x4 projection from the box coordinate frame to homogeneous pixels."""

    matrix: np.ndarray
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        P = np.asarray(self.matrix, dtype=float).reshape(3, 4)
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        object.__setattr__(self, "matrix", P)
        object.__setattr__(self, "image_size", (int(w), int(h)))


@dataclass(frozen=True)
class Rect2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"invalid rect {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def world_to_ego(point, pose: RigidPose) -> np.ndarray:
    return pose.rotation.T @ (np.asarray(point, dtype=float) - pose.translation)


def ego_to_world(point, pose: RigidPose) -> np.ndarray:
    return pose.rotation @ np.asarray(point, dtype=float) + pose.translation


def box_world_to_ego(box: Box3D, pose: RigidPose) -> Box3D:
    return Box3D(tuple(world_to_ego(box.center, pose)), box.dims, box.heading - pose.yaw)


def box_ego_to_world(box: Box3D, pose: RigidPose) -> Box3D:
    return Box3D(tuple(ego_to_world(box.center, pose)), box.dims, box.heading + pose.yaw)


# Corner sign pattern matching Box3D.corners; edges differ in one sign.
_SIGNS = np.array(
    [[1, 1, 1], [1, -1, 1], [1, 1, -1], [1, -1, -1], [-1, 1, 1], [-1, -1, 1], [-1, 1, -1], [-1, -1, -1]]
)
_EDGE_PAIRS = [
    (i, j) for i in range(8) for j in range(i + 1, 8) if int(np.sum(_SIGNS[i] != _SIGNS[j])) == 1
]


def project_box(box: Box3D, cam: CameraProjection, clip: bool = True) -> Rect2D | None:
    """Project a box into the image; ``None`` means out of view.

    Edges crossing the camera plane are cut at a small positive depth so
    that partially visible boxes still produce a sensible hull.
    """
    pts = box.corners()
    homo = np.hstack([pts, np.ones((8, 1))]) @ cam.matrix.T
    depth = homo[:, 2]
    if np.all(depth <= _NEAR_PLANE):
        return None

    visible = [homo[i] for i in range(8) if depth[i] > _NEAR_PLANE]
    if len(visible) < 8:
        for i, j in _EDGE_PAIRS:
            di, dj = depth[i], depth[j]
            if (di > _NEAR_PLANE) != (dj > _NEAR_PLANE):
                s = (_NEAR_PLANE - di) / (dj - di)
                visible.append(homo[i] + s * (homo[j] - homo[i]))
    uv = np.array([v[:2] / v[2] for v in visible])
    x0, y0 = uv.min(axis=0)
    x1, y1 = uv.max(axis=0)
    if not clip:
        return Rect2D(float(x0), float(y0), float(x1), float(y1))
    width, height = cam.image_size
    x0, x1 = max(x0, 0.0), min(x1, float(width))
    y0, y1 = max(y0, 0.0), min(y1, float(height))
    if x0 >= x1 or y0 >= y1:
        return None
    return Rect2D(float(x0), float(y0), float(x1), float(y1))


def iou_2d(a: Rect2D, b: Rect2D) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def bev_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
