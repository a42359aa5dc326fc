"""Differentiable CPU rasterizer for flat Gaussians.

Forward: Gaussians are culled against the camera, projected with the
standard perspective-Jacobian affine approximation, depth-sorted globally,
and alpha-composited front to back into color / normal / plane-distance /
alpha maps.  The depth map is always derived from the composited distance
and normal maps as ``depth = distance / (normal . ray)``, never computed
independently, so that identity holds bit-for-bit by construction.

Backward: given per-pixel adjoints of any scalar loss with respect to the
output maps, ``render_backward`` replays the compositing per row band and
chains analytically through every step of the forward computation,
returning exact gradients for all Gaussian parameters.

Per-Gaussian normals are flipped to face the camera at render time
(deterministic sign from the camera-space mean), so primitives blend
coherently regardless of quaternion sign; depth is unaffected because the
flip cancels in the distance/normal quotient.

Rendering is deterministic and independent of the worker thread count:
the image is split into fixed 16-row bands, each band composites in global
depth order, and band partials are reduced in band order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import parallel
from .errors import ContractViolationError
from .geometry import Camera, ray_grid
from .scene import (
    COV2D_FLOOR,
    FlatGaussian,
    GaussianScene,
    quat_rotmat_jacobians,
    quat_to_rotmats,
)

ALPHA_CLAMP = 0.99
ALPHA_CUTOFF = 1.0 / 255.0
MAHALANOBIS_SQ_CUTOFF = 36.0  # 6 sigma
T_TERMINATE = 1e-4
DENOM_EPS = 1e-4
Z_NEAR = 1e-6


@dataclass
class SplatGradients:
    """Per-Gaussian loss gradients, rows parallel to the scene arrays."""

    positions: np.ndarray
    quaternions: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
            np.zeros(n), np.zeros((n, 3)),
        )

    def add(self, other: "SplatGradients") -> "SplatGradients":
        self.positions += other.positions
        self.quaternions += other.quaternions
        self.scales += other.scales
        self.opacities += other.opacities
        self.colors += other.colors
        return self

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.positions, self.quaternions, self.scales,
                      self.opacities, self.colors)
        )


@dataclass
class MapAdjoints:
    """dLoss/dMap inputs for the backward pass; None means all-zero."""

    color: Optional[np.ndarray] = None      # (H, W, 3)
    normal: Optional[np.ndarray] = None     # (H, W, 3)
    distance: Optional[np.ndarray] = None   # (H, W)
    depth: Optional[np.ndarray] = None      # (H, W)
    alpha: Optional[np.ndarray] = None      # (H, W)

    @classmethod
    def zeros(cls, height: int, width: int) -> "MapAdjoints":
        return cls(
            np.zeros((height, width, 3)), np.zeros((height, width, 3)),
            np.zeros((height, width)), np.zeros((height, width)),
            np.zeros((height, width)),
        )

    def add_scaled(self, other: "MapAdjoints", scale: float) -> "MapAdjoints":
        """Accumulate ``scale * other`` into self (self fields must exist)."""
        for name in ("color", "normal", "distance", "depth", "alpha"):
            o = getattr(other, name)
            if o is not None:
                getattr(self, name)[...] += scale * o
        return self


class _Projected:
    """Per-visible-Gaussian screen-space data in front-to-back order."""

    __slots__ = ("idx", "mu_cam", "mean2d", "cov2d", "cov_inv", "normal_cam",
                 "flip", "dist", "bbox", "opacity", "color")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)

    def __len__(self):
        return len(self.idx)


@dataclass
class RenderBuffers:
    """Rendered maps plus the cached projection data the backward pass needs."""

    color: np.ndarray       # (H, W, 3)
    normal: np.ndarray      # (H, W, 3) camera frame, alpha-blended, unnormalized
    distance: np.ndarray    # (H, W)
    depth: np.ndarray       # (H, W); 0 where invalid
    alpha: np.ndarray       # (H, W)
    depth_valid: np.ndarray  # (H, W) bool
    proj: _Projected = field(repr=False)
    fingerprint: bytes = field(repr=False)

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]


def evaluate_alpha(g: FlatGaussian, cov2d: np.ndarray, mean2d: np.ndarray, p) -> float:
    """Opacity contribution of one projected Gaussian at continuous pixel p.

    Returns 0.0 for contributions outside the 6-sigma footprint or below
    the 1/255 cutoff; otherwise ``opacity * exp(-m/2)`` clamped to 0.99.
    """
    delta = np.asarray(p, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    m = float(delta @ np.linalg.solve(cov2d, delta))
    if m > MAHALANOBIS_SQ_CUTOFF:
        return 0.0
    a = g.opacity * np.exp(-0.5 * m)
    if a < ALPHA_CUTOFF:
        return 0.0
    return float(min(a, ALPHA_CLAMP))


def _fingerprint(scene: GaussianScene, cam: Camera) -> bytes:
    h = hashlib.sha1(scene.parameter_fingerprint())
    intr = cam.intrinsics
    h.update(np.array([intr.fx, intr.fy, intr.cx, intr.cy,
                       intr.width, intr.height], dtype=np.float64).tobytes())
    h.update(cam.pose.rotation.tobytes())
    h.update(cam.pose.translation.tobytes())
    return h.digest()


def _project_scene(scene: GaussianScene, cam: Camera) -> _Projected:
    intr, pose = cam.intrinsics, cam.pose
    n = len(scene)
    if n == 0:
        return _empty_projected()

    mu_cam = scene.positions @ pose.rotation.T + pose.translation
    visible = (mu_cam[:, 2] > Z_NEAR) & (scene.opacities >= ALPHA_CUTOFF)
    idx = np.nonzero(visible)[0]
    if idx.size == 0:
        return _empty_projected()
    # Global front-to-back order; stable sort keeps ties deterministic.
    order = np.argsort(mu_cam[idx, 2], kind="stable")
    idx = idx[order]

    mu_cam = mu_cam[idx]
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    mean2d = np.stack(
        [intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1
    )

    R_g = quat_to_rotmats(scene.quaternions[idx])
    s2 = scene.scales[idx] ** 2
    cov3d = np.einsum("nij,nj,nkj->nik", R_g, s2, R_g)

    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / z**2
    M = J @ pose.rotation
    cov2d = np.einsum("nij,njk,nlk->nil", M, cov3d, M)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    cov_inv = np.empty_like(cov2d)
    cov_inv[:, 0, 0] = cov2d[:, 1, 1] / det
    cov_inv[:, 1, 1] = cov2d[:, 0, 0] / det
    cov_inv[:, 0, 1] = -cov2d[:, 0, 1] / det
    cov_inv[:, 1, 0] = -cov2d[:, 1, 0] / det

    normal0 = np.einsum("ij,nj->ni", pose.rotation, R_g[:, :, 2])
    flip = np.where(np.einsum("ni,ni->n", normal0, mu_cam) > 0, -1.0, 1.0)
    normal_cam = flip[:, None] * normal0
    dist = np.einsum("ni,ni->n", normal_cam, mu_cam)

    # Conservative 6-sigma screen bounds; pixel centers sit at index + 0.5.
    rx = 6.0 * np.sqrt(cov2d[:, 0, 0])
    ry = 6.0 * np.sqrt(cov2d[:, 1, 1])
    u0 = np.maximum(0, np.ceil(mean2d[:, 0] - rx - 0.5)).astype(np.int64)
    u1 = np.minimum(intr.width - 1, np.floor(mean2d[:, 0] + rx - 0.5)).astype(np.int64) + 1
    v0 = np.maximum(0, np.ceil(mean2d[:, 1] - ry - 0.5)).astype(np.int64)
    v1 = np.minimum(intr.height - 1, np.floor(mean2d[:, 1] + ry - 0.5)).astype(np.int64) + 1
    nonempty = (u1 > u0) & (v1 > v0)

    keep = np.nonzero(nonempty)[0]
    return _Projected(
        idx=idx[keep], mu_cam=mu_cam[keep], mean2d=mean2d[keep],
        cov2d=cov2d[keep], cov_inv=cov_inv[keep],
        normal_cam=normal_cam[keep], flip=flip[keep], dist=dist[keep],
        bbox=np.stack([u0, u1, v0, v1], axis=1)[keep],
        opacity=scene.opacities[idx[keep]], color=scene.colors[idx[keep]],
    )


def _empty_projected() -> _Projected:
    return _Projected(
        idx=np.zeros(0, dtype=np.int64), mu_cam=np.zeros((0, 3)),
        mean2d=np.zeros((0, 2)), cov2d=np.zeros((0, 2, 2)),
        cov_inv=np.zeros((0, 2, 2)), normal_cam=np.zeros((0, 3)),
        flip=np.zeros(0), dist=np.zeros(0),
        bbox=np.zeros((0, 4), dtype=np.int64), opacity=np.zeros(0),
        color=np.zeros((0, 3)),
    )


def _composite_band(proj: _Projected, r0: int, r1: int, width: int, record: bool):
    """Front-to-back compositing for rows [r0, r1).

    Returns (color, normal, distance, alpha, T_final, records); ``records``
    is None unless ``record``, else a list of per-Gaussian replay tuples
    (k, rows, cols, ag, ok, T_before) in compositing order.
    """
    h = r1 - r0
    color = np.zeros((h, width, 3))
    normal = np.zeros((h, width, 3))
    distance = np.zeros((h, width))
    alpha_map = np.zeros((h, width))
    T = np.ones((h, width))
    records = [] if record else None

    ucols = np.arange(width) + 0.5
    vrows = np.arange(r0, r1) + 0.5

    for k in range(len(proj)):
        u0, u1, v0, v1 = proj.bbox[k]
        bv0, bv1 = max(v0, r0), min(v1, r1)
        if bv0 >= bv1:
            continue
        rows = slice(bv0 - r0, bv1 - r0)
        cols = slice(u0, u1)

        dx = ucols[cols] - proj.mean2d[k, 0]
        dy = vrows[rows] - proj.mean2d[k, 1]
        a = proj.cov_inv[k, 0, 0]
        b = proj.cov_inv[k, 0, 1]
        c = proj.cov_inv[k, 1, 1]
        m = (a * dx**2)[None, :] + (2.0 * b) * dy[:, None] * dx[None, :] \
            + (c * dy**2)[:, None]
        ag = proj.opacity[k] * np.exp(-0.5 * m)
        T_before = T[rows, cols]
        ok = (m <= MAHALANOBIS_SQ_CUTOFF) & (ag >= ALPHA_CUTOFF) \
            & (T_before > T_TERMINATE)
        alpha = np.minimum(ag, ALPHA_CLAMP)
        w = np.where(ok, alpha * T_before, 0.0)

        color[rows, cols] += w[:, :, None] * proj.color[k]
        normal[rows, cols] += w[:, :, None] * proj.normal_cam[k]
        distance[rows, cols] += w * proj.dist[k]
        alpha_map[rows, cols] += w

        # T_before is a view into T; snapshot it before the in-place update.
        if record:
            records.append((k, rows, cols, ag, ok, T_before.copy()))
        T[rows, cols] = np.where(ok, T_before * (1.0 - alpha), T_before)

    return color, normal, distance, alpha_map, T, records


def render(scene: GaussianScene, cam: Camera) -> RenderBuffers:
    """Rasterize the scene into color/normal/distance/depth/alpha maps."""
    intr = cam.intrinsics
    height, width = intr.height, intr.width
    proj = _project_scene(scene, cam)

    color = np.zeros((height, width, 3))
    normal = np.zeros((height, width, 3))
    distance = np.zeros((height, width))
    alpha = np.zeros((height, width))

    bands = parallel.row_bands(height)

    def run(band):
        return band, _composite_band(proj, band[0], band[1], width, record=False)

    for (r0, r1), (bc, bn, bd, ba, bT, _) in parallel.map_ordered(run, bands):
        color[r0:r1] = bc + scene.background * bT[:, :, None]
        normal[r0:r1] = bn
        distance[r0:r1] = bd
        alpha[r0:r1] = ba

    rays = ray_grid(intr)
    denom = np.einsum("hwc,hwc->hw", normal, rays)
    depth_valid = np.abs(denom) > DENOM_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(depth_valid, distance / np.where(depth_valid, denom, 1.0), 0.0)

    return RenderBuffers(
        color=color, normal=normal, distance=distance, depth=depth,
        alpha=alpha, depth_valid=depth_valid, proj=proj,
        fingerprint=_fingerprint(scene, cam),
    )


def _band_backward(proj, r0, r1, width, background, g_color, g_normal, g_dist,
                   g_alpha):
    """Replay one band and return per-Gaussian partial gradients.

    Output arrays are indexed by position in ``proj`` (front-to-back order).
    """
    nvis = len(proj)
    out = {
        "mean2d": np.zeros((nvis, 2)), "cov_inv": np.zeros((nvis, 2, 2)),
        "sigma": np.zeros(nvis), "color": np.zeros((nvis, 3)),
        "normal": np.zeros((nvis, 3)), "dist": np.zeros(nvis),
    }
    _, _, _, _, T_final, records = _composite_band(proj, r0, r1, width, record=True)

    gc = g_color[r0:r1] if g_color is not None else None
    gn = g_normal[r0:r1] if g_normal is not None else None
    gd = g_dist[r0:r1] if g_dist is not None else None
    ga = g_alpha[r0:r1] if g_alpha is not None else None

    # Suffix accumulator S(px) = sum_{later j} w_j psi_j, seeded with the
    # background term bg . g_color * T_final.
    if gc is not None:
        S = T_final * (gc @ background)
    else:
        S = np.zeros_like(T_final)

    ucols = np.arange(width) + 0.5
    vrows = np.arange(r0, r1) + 0.5

    for k, rows, cols, ag, ok, T_before in reversed(records):
        psi = np.zeros_like(ag)
        if gc is not None:
            psi += gc[rows, cols] @ proj.color[k]
        if gn is not None:
            psi += gn[rows, cols] @ proj.normal_cam[k]
        if gd is not None:
            psi += gd[rows, cols] * proj.dist[k]
        if ga is not None:
            psi += ga[rows, cols]

        alpha = np.minimum(ag, ALPHA_CLAMP)
        w = np.where(ok, alpha * T_before, 0.0)

        if gc is not None:
            out["color"][k] += np.einsum("hw,hwc->c", w, gc[rows, cols])
        if gn is not None:
            out["normal"][k] += np.einsum("hw,hwc->c", w, gn[rows, cols])
        if gd is not None:
            out["dist"][k] += np.sum(w * gd[rows, cols])

        g_al = np.where(ok, T_before * psi - S[rows, cols] / (1.0 - alpha), 0.0)
        gag = np.where(ag < ALPHA_CLAMP, g_al, 0.0)
        # d alpha / d sigma = G = ag / sigma; d alpha / dm = -ag / 2
        out["sigma"][k] += np.sum(gag * (ag / proj.opacity[k]))
        gm = -0.5 * gag * ag

        dx = (ucols[cols] - proj.mean2d[k, 0])[None, :]
        dy = (vrows[rows] - proj.mean2d[k, 1])[:, None]
        a = proj.cov_inv[k, 0, 0]
        b = proj.cov_inv[k, 0, 1]
        c = proj.cov_inv[k, 1, 1]
        out["mean2d"][k, 0] += np.sum(gm * -(2.0 * a * dx + 2.0 * b * dy))
        out["mean2d"][k, 1] += np.sum(gm * -(2.0 * b * dx + 2.0 * c * dy))
        gxx = np.sum(gm * dx * dx)
        gxy = np.sum(gm * dx * dy)
        gyy = np.sum(gm * dy * dy)
        out["cov_inv"][k, 0, 0] += gxx
        out["cov_inv"][k, 0, 1] += gxy
        out["cov_inv"][k, 1, 0] += gxy
        out["cov_inv"][k, 1, 1] += gyy

        S[rows, cols] += w * psi

    return out


def render_backward(scene: GaussianScene, cam: Camera, buffers: RenderBuffers,
                    adjoints: MapAdjoints) -> SplatGradients:
    """Exact parameter gradients for a loss with the given per-map adjoints.

    ``buffers`` must come from ``render`` on the same scene state and
    camera, otherwise a ContractViolationError is raised.
    """
    if buffers.fingerprint != _fingerprint(scene, cam):
        raise ContractViolationError(
            "render buffers do not match the scene/camera state"
        )
    n = len(scene)
    grads = SplatGradients.zeros(n)
    proj = buffers.proj
    if len(proj) == 0:
        return grads

    intr = cam.intrinsics
    height, width = intr.height, intr.width
    rays = ray_grid(intr)

    # Fold the depth adjoint into distance/normal adjoints via the quotient
    # depth = distance / (normal . ray).
    g_color = adjoints.color
    g_normal = adjoints.normal
    g_dist = adjoints.distance
    g_alpha = adjoints.alpha
    if adjoints.depth is not None and np.any(adjoints.depth):
        denom = np.einsum("hwc,hwc->hw", buffers.normal, rays)
        valid = buffers.depth_valid
        safe = np.where(valid, denom, 1.0)
        gD = np.where(valid, adjoints.depth, 0.0)
        g_dist = (np.zeros((height, width)) if g_dist is None else g_dist.copy())
        g_dist += gD / safe
        g_normal = (np.zeros((height, width, 3)) if g_normal is None else g_normal.copy())
        g_normal += (-gD * buffers.distance / safe**2)[:, :, None] * rays

    if all(g is None or not np.any(g) for g in (g_color, g_normal, g_dist, g_alpha)):
        return grads

    bands = parallel.row_bands(height)

    def run(band):
        return _band_backward(proj, band[0], band[1], width, scene.background,
                              g_color, g_normal, g_dist, g_alpha)

    partials = parallel.map_ordered(run, bands)
    acc = partials[0]
    for p in partials[1:]:
        for key in acc:
            acc[key] += p[key]

    # --- chain screen-space gradients back to the 3D parameters ---
    vis = proj.idx
    mu_cam = proj.mu_cam
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    fx, fy = intr.fx, intr.fy
    R_w2c = cam.pose.rotation

    quats = scene.quaternions[vis]
    R_g = quat_to_rotmats(quats)
    s = scene.scales[vis]
    cov3d = np.einsum("nij,nj,nkj->nik", R_g, s**2, R_g)

    J = np.zeros((len(vis), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    M = J @ R_w2c

    # cov2d = M cov3d M^T + floor; gradients arrived w.r.t. cov2d^-1.
    inv = proj.cov_inv
    g_cov2d = -np.einsum("nij,njk,nkl->nil", inv, acc["cov_inv"], inv)
    g_cov3d = np.einsum("nji,njk,nkl->nil", M, g_cov2d, M)
    g_M = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, M, cov3d)
    g_J = np.einsum("nij,kj->nik", g_M, R_w2c)

    g_mu_cam = np.einsum("nji,nj->ni", J, acc["mean2d"])
    # J's own dependence on the camera-space mean.
    g_mu_cam[:, 0] += g_J[:, 0, 2] * (-fx / z**2)
    g_mu_cam[:, 1] += g_J[:, 1, 2] * (-fy / z**2)
    g_mu_cam[:, 2] += (
        g_J[:, 0, 0] * (-fx / z**2)
        + g_J[:, 1, 1] * (-fy / z**2)
        + g_J[:, 0, 2] * (2.0 * fx * x / z**3)
        + g_J[:, 1, 2] * (2.0 * fy * y / z**3)
    )

    # Plane distance attribute d = n_cam . mu_cam.
    g_n_cam = acc["normal"] + acc["dist"][:, None] * mu_cam
    g_mu_cam += acc["dist"][:, None] * proj.normal_cam

    # n_cam = flip * R_w2c @ n_world, n_world = third column of R_g.
    g_n_world = proj.flip[:, None] * np.einsum("ji,nj->ni", R_w2c, g_n_cam)

    # cov3d = sum_k s_k^2 r_k r_k^T.
    g_scales = 2.0 * s * np.einsum("nik,nij,njk->nk", R_g, g_cov3d, R_g)
    g_R = 2.0 * np.einsum("nij,njk,nk->nik", g_cov3d, R_g, s**2)
    g_R[:, :, 2] += g_n_world

    Jq = quat_rotmat_jacobians(quats)
    g_qhat = np.einsum("nqij,nij->nq", Jq, g_R)
    qnorm = np.linalg.norm(quats, axis=1, keepdims=True)
    qhat = quats / qnorm
    g_q = (g_qhat - qhat * np.einsum("ni,ni->n", qhat, g_qhat)[:, None]) / qnorm

    g_mu_world = g_mu_cam @ R_w2c

    grads.positions[vis] += g_mu_world
    grads.quaternions[vis] += g_q
    grads.scales[vis] += g_scales
    grads.opacities[vis] += acc["sigma"]
    grads.colors[vis] += acc["color"]
    return grads
