"""Camera models, projections, relative poses, and plane-induced homographies.

Conventions used everywhere in this package:

* Camera frame: x right, y down, z forward (OpenCV style); a point is in
  front of the camera iff its camera-space z is positive.
* Poses are stored world-to-camera: ``x_cam = R @ x_world + t``.  The
  camera-to-world rotation is available as ``CameraPose.rotation_c2w``.
* Depth means z-depth: ``backproject(p, d)`` returns ``d * K^-1 @ (u, v, 1)``
  whose z component equals ``d`` exactly.  This makes the identity
  ``depth = distance / (normal . K^-1 p)`` algebraically exact for points
  on a plane.
* Pixel (i, j) of an image array (row i, column j) samples the continuous
  pixel coordinate (j + 0.5, i + 0.5).  All functions below take and return
  continuous coordinates (u, v); callers add the half-pixel offset when
  iterating over integer pixel indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegeneratePlaneError,
    DomainError,
    PointAtInfinityError,
)

ORTHONORMALITY_TOL = 1e-9

# Planes closer to the camera center than this (in scene units) are treated
# as degenerate when building homographies.
DEFAULT_PLANE_EPS = 1e-6


def _check_rotation(R: np.ndarray, tol: float = ORTHONORMALITY_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise DomainError(f"rotation must be 3x3, got {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err >= tol:
        raise DomainError(f"rotation not orthonormal: |R^T R - I| = {err:.3e}")
    if np.linalg.det(R) < 0:
        raise DomainError("rotation has determinant -1 (reflection)")
    return R


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise DomainError("image size must be at least 2x2")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise DomainError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @property
    def rotation_c2w(self) -> np.ndarray:
        """Camera-to-world rotation."""
        return self.rotation.T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, x_world: np.ndarray) -> np.ndarray:
        x = np.asarray(x_world, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def to_world(self, x_cam: np.ndarray) -> np.ndarray:
        x = np.asarray(x_cam, dtype=np.float64)
        return (x - self.translation) @ self.rotation


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose

    @property
    def optical_axis_world(self) -> np.ndarray:
        """Viewing direction (camera +z) expressed in world coordinates."""
        return self.pose.rotation.T[:, 2]


@dataclass(frozen=True)
class RelativePose:
    """Maps reference-camera coordinates to nearby-camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    def inverse(self) -> "RelativePose":
        return RelativePose(self.rotation.T, -self.rotation.T @ self.translation)


def backproject(p, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    """Lift continuous pixel coordinates to a camera-space point at z-depth ``depth``."""
    if depth <= 0:
        raise DomainError(f"depth must be positive, got {depth}")
    u, v = float(p[0]), float(p[1])
    return np.array(
        [depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth]
    )


def project(P, intr: CameraIntrinsics) -> np.ndarray:
    """Project a camera-space point to continuous pixel coordinates."""
    P = np.asarray(P, dtype=np.float64)
    if P[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth z={P[2]}")
    return np.array(
        [intr.fx * P[0] / P[2] + intr.cx, intr.fy * P[1] / P[2] + intr.cy]
    )


def relative_pose(ref: Camera, near: Camera) -> RelativePose:
    """Transform taking reference-camera coordinates to nearby-camera coordinates."""
    R_r, t_r = ref.pose.rotation, ref.pose.translation
    R_n, t_n = near.pose.rotation, near.pose.translation
    R_rn = R_n @ R_r.T
    t_rn = t_n - R_rn @ t_r
    return RelativePose(R_rn, t_rn)


def transform_point(P_r, rel: RelativePose) -> np.ndarray:
    """Map a reference-camera point into the nearby camera frame."""
    return rel.rotation @ np.asarray(P_r, dtype=np.float64) + rel.translation


def plane_homography(
    rel: RelativePose,
    intr_r: CameraIntrinsics,
    intr_n: CameraIntrinsics,
    n_r: np.ndarray,
    d_r: float,
    plane_eps: float = DEFAULT_PLANE_EPS,
) -> np.ndarray:
    """Homography mapping reference pixels on the plane ``{X : n_r . X = d_r}``
    (reference camera frame) to nearby-view pixels.

    For X on the plane, ``X_n = R X + T (n . X) / d = (R + T n^T / d) X``;
    with a camera-facing normal and the positive plane distance this is the
    usual ``R - T n^T / d`` form, here kept in fully signed terms.
    """
    if abs(d_r) < plane_eps:
        raise DegeneratePlaneError(f"|d_r| = {abs(d_r):.3e} below epsilon {plane_eps}")
    n_r = np.asarray(n_r, dtype=np.float64).reshape(3)
    M = rel.rotation + np.outer(rel.translation, n_r) / d_r
    return intr_n.matrix @ M @ intr_r.inverse_matrix


def warp_pixel(H: np.ndarray, p) -> np.ndarray:
    """Apply a homography to continuous pixel coordinates and dehomogenize."""
    q = H @ np.array([p[0], p[1], 1.0])
    if abs(q[2]) < 1e-12:
        raise PointAtInfinityError("homogeneous third component vanished")
    return q[:2] / q[2]


def ray_grid(intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) array of K^-1 (u+0.5, v+0.5, 1) for every pixel index."""
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    x = (u - intr.cx) / intr.fx
    y = (v - intr.cy) / intr.fy
    rays = np.empty((intr.height, intr.width, 3))
    rays[..., 0] = x[None, :]
    rays[..., 1] = y[:, None]
    rays[..., 2] = 1.0
    return rays


def look_at_pose(position, target, up_hint=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise DomainError("camera position coincides with look-at target")
    z_c = forward / norm
    up = np.asarray(up_hint, dtype=np.float64)
    if abs(np.dot(up, z_c)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x_c = np.cross(up, z_c)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    R = np.stack([x_c, y_c, z_c], axis=0)
    return CameraPose(R, -R @ position)
