"""Pinhole camera model, rigid transforms, and two-view triangulation.

Conventions: camera frames are right-handed with x right, y down, z forward
(optical axis). Extrinsics map world points into the camera frame, so a
camera's center in world coordinates is ``-R.T @ t``. All lengths are meters,
all pixel coordinates are continuous with the origin at the top-left pixel
center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRays, NonPositiveDepth

# Rays closer to parallel than this (radians) refuse to triangulate.
DEGENERATE_RAY_ANGLE_RAD = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: ``p_out = R @ p_in + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("non-finite transform")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns the transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def camera_center(self) -> np.ndarray:
        """World position of the camera when this is a camera-from-world transform."""
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {"R": [[float(v) for v in row] for row in self.R], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["R"], dtype=float), np.asarray(d["t"], dtype=float))


@dataclass(frozen=True)
class ViewPair:
    """Two calibrated views sharing one physical camera.

    ``baseline_m`` is derived: the distance between the two camera centers.
    """

    intrinsics: CameraIntrinsics
    ref_from_world: RigidTransform
    query_from_world: RigidTransform
    baseline_m: float = field(init=False)

    def __post_init__(self):
        b = float(np.linalg.norm(self.ref_from_world.camera_center()
                                 - self.query_from_world.camera_center()))
        object.__setattr__(self, "baseline_m", b)


# ---------------------------------------------------------------------------
# rotation helpers


def rot_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn uniformly from SO(3) (Shoemake quaternion method)."""
    u1, u2, u3 = rng.random(3)
    q = np.array([
        math.sqrt(u1) * math.cos(2 * math.pi * u3),
        math.sqrt(1 - u1) * math.sin(2 * math.pi * u2),
        math.sqrt(1 - u1) * math.cos(2 * math.pi * u2),
        math.sqrt(u1) * math.sin(2 * math.pi * u3),
    ])
    return quat_to_matrix(q)


def small_rotation(rng: np.random.Generator, max_angle_rad: float) -> np.ndarray:
    """Rotation about a uniformly random axis by an angle in [0, max_angle_rad]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle_rad)
    w = math.cos(angle / 2.0)
    xyz = math.sin(angle / 2.0) * axis
    return quat_to_matrix(np.concatenate([[w], xyz]))


def rotation_angle_rad(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


# ---------------------------------------------------------------------------
# projection


def project_point(p: np.ndarray, K: CameraIntrinsics) -> tuple[float, float, float]:
    """Project a camera-frame point to pixel coordinates.

    Returns (u, v, depth). Raises NonPositiveDepth for points at or behind
    the camera plane.
    """
    x, y, z = np.asarray(p, dtype=float).reshape(3)
    if z <= 0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def project_points(p: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) camera-frame points.

    Returns (u, v, z) arrays; entries with z <= 0 hold NaN pixel coordinates
    instead of raising, so callers can mask them.
    """
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, K.fx * p[:, 0] / z + K.cx, np.nan)
        v = np.where(z > 0, K.fy * p[:, 1] / z + K.cy, np.nan)
    return u, v, z


def unproject_pixel(u: float, v: float, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Back-project a pixel at a given depth into the camera frame."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} is not positive")
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def transform_point(T: RigidTransform, p: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to a point or a stack of points."""
    return T.apply(p)


def pixel_ray(u: float, v: float, K: CameraIntrinsics, cam_from_world: RigidTransform):
    """World-frame ray through a pixel: (origin, unit direction)."""
    d_cam = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    d_world = cam_from_world.R.T @ d_cam
    return cam_from_world.camera_center(), d_world / np.linalg.norm(d_world)


def triangulate(uv_ref: tuple[float, float], uv_query: tuple[float, float], pair: ViewPair) -> np.ndarray:
    """Midpoint triangulation of one pixel correspondence.

    Back-projects a ray from each view and returns the midpoint of the common
    perpendicular segment between the two rays. Raises DegenerateRays when the
    rays are within DEGENERATE_RAY_ANGLE_RAD of parallel (e.g. zero baseline).
    """
    o1, d1 = pixel_ray(uv_ref[0], uv_ref[1], pair.intrinsics, pair.ref_from_world)
    o2, d2 = pixel_ray(uv_query[0], uv_query[1], pair.intrinsics, pair.query_from_world)

    if np.linalg.norm(o1 - o2) < 1e-12:
        raise DegenerateRays("camera centers coincide; no parallax to triangulate")

    cos_angle = abs(float(np.dot(d1, d2)))
    angle = math.acos(min(1.0, cos_angle))
    if angle < DEGENERATE_RAY_ANGLE_RAD:
        raise DegenerateRays(f"ray angle {angle:.2e} rad below {DEGENERATE_RAY_ANGLE_RAD:.0e}")

    # Solve for s, t minimizing |o1 + s d1 - (o2 + t d2)|.
    b = float(np.dot(d1, d2))
    w = o1 - o2
    s = (b * np.dot(d2, w) - np.dot(d1, w)) / (1.0 - b * b)
    t = (np.dot(d2, w) - b * np.dot(d1, w)) / (1.0 - b * b)
    return 0.5 * ((o1 + s * d1) + (o2 + t * d2))
