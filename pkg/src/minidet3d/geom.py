"""Oriented 3D boxes, rigid transforms, and pinhole camera projection.

Conventions used throughout the package:

- A box is parameterized by its center (x, y, z), size (l, w, h) and a yaw
  angle about the vertical (+z) axis, with yaw normalized into (-pi, pi].
  Length runs along the box's local x axis at yaw 0.
- Rigid transforms are stored as translation + unit quaternion (w, x, y, z).
- Corner order is fixed: bottom face counter-clockwise viewed from above,
  starting at local (+l/2, -w/2), then the top face in the same x-y order.
  This makes corner-set comparisons element-wise.
- Camera frames are x-right, y-down, z-forward. The projection of a point
  with positive depth is (u, v) = (fx*x/z + cx, fy*y/z + cy). Points behind
  the camera or outside [0, width) x [0, height) are tagged invisible.

Everything here is pure functions over frozen values; all geometry is
64-bit floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GimbalRisk

# Unit corner offsets in the box frame: bottom face CCW from above, then top.
_CORNER_SIGNS = np.array(
    [
        [+1, -1, -1],
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, -1],
        [+1, -1, +1],
        [+1, +1, +1],
        [-1, +1, +1],
        [-1, -1, +1],
    ],
    dtype=np.float64,
)


def wrap_angle(theta: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta}")
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass(frozen=True)
class Box7:
    """Oriented 3D bounding box: center (m), size (m), yaw (rad) about +z.

    Sizes must be strictly positive; yaw is normalized into (-pi, pi] at
    construction, so two parameterizations of the same box compare equal.
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "w", "h", "yaw"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"Box7.{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box7 sizes must be positive, got l={self.l}, w={self.w}, h={self.h}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def params(self) -> np.ndarray:
        """The 7-vector (x, y, z, l, w, h, yaw)."""
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_params(cls, p) -> "Box7":
        p = np.asarray(p, dtype=np.float64).reshape(7)
        return cls(*p.tolist())


def _quat_normalize(q: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
    norm = math.sqrt(sum(c * c for c in q))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"quaternion norm {norm!r} deviates from 1 by more than 1e-9")
    if abs(norm - 1.0) <= 1e-12:
        # Already unit to working precision; keep bits stable so that
        # normalization is idempotent and serialization round-trips exactly.
        return q
    return (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm)


def quat_multiply(a, b) -> tuple[float, float, float, float]:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_to_matrix(q) -> np.ndarray:
    """Convert quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ],
        dtype=np.float64,
    )


def quat_from_matrix(R: np.ndarray) -> tuple[float, float, float, float]:
    """Convert a 3x3 rotation matrix to quaternion (w, x, y, z)."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / math.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (R[2, 1] - R[1, 2]) * s
        y = (R[0, 2] - R[2, 0]) * s
        z = (R[1, 0] - R[0, 1]) * s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    return (w / norm, x / norm, y / norm, z / norm)


def quat_from_yaw(yaw: float) -> tuple[float, float, float, float]:
    half = 0.5 * float(yaw)
    return (math.cos(half), 0.0, 0.0, math.sin(half))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotate by `rotation` (unit quaternion w,x,y,z), then translate.

    Stored as plain float tuples so poses are hashable values that compare
    and serialize exactly.
    """

    translation: tuple[float, float, float]
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        q = tuple(float(v) for v in self.rotation)
        if len(t) != 3:
            raise ValueError(f"translation must have 3 components, got {len(t)}")
        if len(q) != 4:
            raise ValueError(f"rotation must have 4 components, got {len(q)}")
        if not all(math.isfinite(v) for v in t + q):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", _quat_normalize(q))

    @classmethod
    def identity(cls) -> "Pose":
        return cls((0.0, 0.0, 0.0))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix, for interop with matrix-based pipelines."""
        T = np.eye(4, dtype=np.float64)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one (3,) point or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + np.asarray(self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Transform that applies `other` first, then self."""
        t = self.apply(np.asarray(other.translation))
        q = quat_multiply(self.rotation, other.rotation)
        norm = math.sqrt(sum(c * c for c in q))
        q = tuple(c / norm for c in q)
        return Pose(tuple(t.tolist()), q)

    def inverse(self) -> "Pose":
        w, x, y, z = self.rotation
        conj = (w, -x, -y, -z)
        t_inv = -(np.asarray(self.translation) @ quat_to_matrix(conj).T)
        return Pose(tuple(t_inv.tolist()), conj)

    def tilt_angle(self) -> float:
        """Angle (rad) by which this rotation tips the vertical axis."""
        rotated_z = self.rotation_matrix()[:, 2]
        return math.acos(min(1.0, max(-1.0, float(rotated_z[2]))))

    def heading(self) -> float:
        """Yaw component: direction the rotated x axis points in the x-y plane."""
        rotated_x = self.rotation_matrix()[:, 0]
        return math.atan2(float(rotated_x[1]), float(rotated_x[0]))


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Composition a after b: (a ∘ b)(p) == a(b(p))."""
    return a.compose(b)


def pose_inverse(p: Pose) -> Pose:
    return p.inverse()


def box_corners(box: Box7) -> np.ndarray:
    """The 8 corners of a box, (8, 3), in the documented canonical order."""
    half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])
    local = _CORNER_SIGNS * half
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ Rz.T + box.center


_TILT_TOLERANCE = 1e-6  # rad


def transform_box(box: Box7, pose: Pose) -> Box7:
    """Map a box through a rigid transform, keeping the yaw-only parameterization.

    Sizes are preserved; yaw picks up the pose's heading. Raises GimbalRisk
    if the pose tips the vertical axis by more than 1e-6 rad, because a
    tilted box has no faithful yaw-only representation.
    """
    if pose.tilt_angle() > _TILT_TOLERANCE:
        raise GimbalRisk(
            f"pose tilts the vertical axis by {pose.tilt_angle():.3e} rad; "
            "boxes here carry yaw only"
        )
    center = pose.apply(box.center)
    return Box7(
        float(center[0]),
        float(center[1]),
        float(center[2]),
        box.l,
        box.w,
        box.h,
        wrap_angle(box.yaw + pose.heading()),
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths and principal point in pixels, image bounds."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image bounds must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class ProjectedCorner:
    """One corner's projection. u/v are None for points at or behind the camera."""

    u: float | None
    v: float | None
    visible: bool


def project_corners(corners: np.ndarray, cam: CameraIntrinsics) -> list[ProjectedCorner]:
    """Project camera-frame points and tag each visible or invisible.

    A corner is visible iff its depth z > 0 and its pixel lands inside
    [0, width) x [0, height). Out-of-bounds corners keep their pixel
    coordinates; behind-camera corners have no meaningful projection.
    """
    pts = np.asarray(corners, dtype=np.float64).reshape(-1, 3)
    out = []
    for x, y, z in pts:
        if z <= 0.0:
            out.append(ProjectedCorner(None, None, False))
            continue
        u = float(cam.fx * x / z + cam.cx)
        v = float(cam.fy * y / z + cam.cy)
        visible = (0.0 <= u < cam.width) and (0.0 <= v < cam.height)
        out.append(ProjectedCorner(u, v, visible))
    return out
