"""Flat (planar) Gaussian primitives and their projection to screen space.

A flat Gaussian is an anisotropic 3D Gaussian whose third scale axis is
kept much shorter than the other two; that axis is the primitive's normal.
The scene stores parameters as packed arrays (one row per Gaussian), which
is what the renderer and optimizer operate on; ``FlatGaussian`` is the
single-primitive view used by scalar helpers and tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import Camera

QUAT_NORM_TOL = 1e-9
MIN_FLAT_SCALE = 1e-6
# s2 may not exceed this fraction of the in-plane scales.
FLAT_RATIO = 0.01
# Anti-aliasing floor added to the diagonal of every projected covariance (px^2).
COV2D_FLOOR = 0.3


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion; normalizes internally."""
    return quat_to_rotmats(np.asarray(q, dtype=np.float64).reshape(1, 4))[0]


def quat_to_rotmats(quats: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions -> (N, 3, 3) rotation matrices (normalizing each)."""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_jacobians(quats: np.ndarray) -> np.ndarray:
    """d(R)/d(q_hat) for unit quaternions: (N, 4, 3, 3).

    Derivatives are with respect to the *normalized* quaternion; callers
    chain through the normalization separately.
    """
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    zero = np.zeros(n)
    J = np.empty((n, 4, 3, 3))
    J[:, 0] = 2 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=1,
    )
    J[:, 1] = 2 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2 * x, -w], axis=-1),
            np.stack([z, w, -2 * x], axis=-1),
        ],
        axis=1,
    )
    J[:, 2] = 2 * np.stack(
        [
            np.stack([-2 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2 * y], axis=-1),
        ],
        axis=1,
    )
    J[:, 3] = 2 * np.stack(
        [
            np.stack([-2 * z, -w, x], axis=-1),
            np.stack([w, -2 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=1,
    )
    return J


@dataclass
class FlatGaussian:
    """One planar Gaussian: position, orientation, scales, opacity, color."""

    position: np.ndarray  # (3,) world
    quaternion: np.ndarray  # (4,) w,x,y,z, unit
    scales: np.ndarray  # (3,) std-devs, scales[2] is the flat axis
    opacity: float
    color: np.ndarray  # (3,) rgb in [0, 1]

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity = float(self.opacity)
        self.validate()

    def validate(self):
        if abs(np.linalg.norm(self.quaternion) - 1.0) > QUAT_NORM_TOL:
            raise DomainError("quaternion is not unit length")
        s = self.scales
        if not (s[2] > 0 and s[0] >= s[2] and s[1] >= s[2]):
            raise DomainError("third scale axis must be positive and shortest")
        if not (0 < self.opacity <= 1):
            raise DomainError("opacity must be in (0, 1]")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.quaternion)


class GaussianScene:
    """Packed set of flat Gaussians plus a background color.

    Arrays are (N, k) float64 and parallel to each other.  The renderer
    reads them as an immutable snapshot; the optimizer mutates them in
    place between renders.
    """

    def __init__(self, positions, quaternions, scales, opacities, colors,
                 background=(0.0, 0.0, 0.0)):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.quaternions = np.ascontiguousarray(quaternions, dtype=np.float64).reshape(n, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(n, 3)
        self.background = np.asarray(background, dtype=np.float64).reshape(3)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "GaussianScene":
        z = np.zeros((0, 3))
        return cls(z, np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), z, background)

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0)) -> "GaussianScene":
        if not gaussians:
            return cls.empty(background)
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.quaternion for g in gaussians]),
            np.stack([g.scales for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            background,
        )

    def gaussian(self, i: int) -> FlatGaussian:
        return FlatGaussian(
            self.positions[i].copy(),
            self.quaternions[i].copy(),
            self.scales[i].copy(),
            float(self.opacities[i]),
            self.colors[i].copy(),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.copy(),
            self.quaternions.copy(),
            self.scales.copy(),
            self.opacities.copy(),
            self.colors.copy(),
            self.background.copy(),
        )

    def keep(self, mask: np.ndarray) -> "GaussianScene":
        """Scene restricted to Gaussians where ``mask`` is true."""
        return GaussianScene(
            self.positions[mask],
            self.quaternions[mask],
            self.scales[mask],
            self.opacities[mask],
            self.colors[mask],
            self.background.copy(),
        )

    def validate(self):
        for i in range(len(self)):
            self.gaussian(i)

    def clamp_parameters(self):
        """Renormalize quaternions and clamp scales/opacities/colors in place.

        Called after every optimizer step so the invariants hold by
        construction without constrained optimization.
        """
        norms = np.linalg.norm(self.quaternions, axis=1, keepdims=True)
        np.divide(self.quaternions, norms, out=self.quaternions)
        self.scales[:, :2] = np.clip(self.scales[:, :2], 10 * MIN_FLAT_SCALE, None)
        flat_cap = FLAT_RATIO * self.scales[:, :2].min(axis=1)
        self.scales[:, 2] = np.clip(self.scales[:, 2], MIN_FLAT_SCALE, flat_cap)
        np.clip(self.opacities, 1e-4, 1.0, out=self.opacities)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)

    def parameter_fingerprint(self) -> bytes:
        """Digest of all parameters; used to tie RenderBuffers to a scene state."""
        import hashlib

        h = hashlib.sha1()
        for arr in (self.positions, self.quaternions, self.scales,
                    self.opacities, self.colors, self.background):
            h.update(arr.tobytes())
        return h.digest()


def covariance3d(g: FlatGaussian) -> np.ndarray:
    """World-frame 3x3 covariance R diag(s^2) R^T."""
    R = g.rotation
    return (R * g.scales**2) @ R.T


def covariance3d_batch(scene: GaussianScene) -> np.ndarray:
    R = quat_to_rotmats(scene.quaternions)
    return np.einsum("nij,nj,nkj->nik", R, scene.scales**2, R)


def gaussian_normal(g: FlatGaussian) -> np.ndarray:
    """Unit normal of the Gaussian plane: the third rotated axis."""
    return g.rotation[:, 2]


def plane_distance(g: FlatGaussian, cam: Camera) -> float:
    """Signed distance of the Gaussian's plane from the camera center.

    Dot product of the camera-frame position with the camera-frame normal;
    the sign follows the normal orientation.
    """
    mu_cam = cam.pose.to_camera(g.position)
    n_cam = cam.pose.rotation @ gaussian_normal(g)
    return float(mu_cam @ n_cam)


def perspective_jacobian(mu_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """2x3 Jacobian of pixel coordinates w.r.t. the camera-space point."""
    x, y, z = mu_cam
    return np.array(
        [[fx / z, 0.0, -fx * x / z**2], [0.0, fy / z, -fy * y / z**2]]
    )


def project_covariance(
    cov: np.ndarray, cam: Camera, mu_world: np.ndarray, floor: float = COV2D_FLOOR
):
    """Screen-space 2x2 covariance of a world-frame Gaussian, or None if culled.

    ``J W cov W^T J^T`` with W the world-to-camera rotation and J the
    perspective Jacobian at the camera-space mean, plus ``floor`` added to
    the diagonal as the usual anti-aliasing dilation.
    """
    mu_cam = cam.pose.to_camera(np.asarray(mu_world, dtype=np.float64))
    if mu_cam[2] <= 0:
        return None
    J = perspective_jacobian(mu_cam, cam.intrinsics.fx, cam.intrinsics.fy)
    M = J @ cam.pose.rotation
    return M @ cov @ M.T + floor * np.eye(2)
