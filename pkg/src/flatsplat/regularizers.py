"""Multi-view geometric consistency losses between a reference and nearby view.

Two losses tie the rendered geometry of a view pair together:

* distance reprojection: every valid reference pixel is warped into the
  nearby view through the homography induced by its rendered plane
  (normal + distance); the reference depth is back-projected, transformed
  into the nearby frame, projected onto the nearby rendered normal, and the
  resulting plane distance must agree with the nearby rendered distance map.
  The squared residuals are averaged over surviving pixels.

* normal enhancement: surface normals are estimated from the two rendered
  depth maps by a fixed four-neighbor plaquette (central-difference tangents,
  cross product), rotated into a common frame, and their disagreement is
  penalized with an image-gradient weight, averaged over surviving pixels.

Both losses return exact adjoints with respect to the rendered normal,
distance, and depth maps of both views, ready to be pushed through
``render_backward``.  Pixels are excluded for exactly one recorded reason
(out-of-bounds warp, invalid depth, grazing normal, residual above
threshold, occlusion); masked pixels contribute exactly zero to values and
adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigurationError, DomainError
from .geometry import (
    Camera,
    CameraIntrinsics,
    RelativePose,
    plane_homography,
    ray_grid,
    relative_pose,
)
from .imgops import gradient_magnitude, luminance
from .interp import BilinearSampler
from .renderer import RenderBuffers, MapAdjoints

NORMAL_EPS = 1e-6
CROSS_EPS = 1e-12
DEFAULT_PLANE_EPS = 1e-6
DEFAULT_DIST_THRESHOLD = 0.03
DEFAULT_NOR_THRESHOLD = 0.52


class MaskReason(IntEnum):
    VALID = 0
    OUT_OF_BOUNDS = 1
    INVALID_DEPTH = 2
    GRAZING_NORMAL = 3
    RESIDUAL_EXCEEDED = 4
    OCCLUDED = 5


@dataclass
class PixelValidityMask:
    """Per-pixel validity with one rejection reason per excluded pixel."""

    reasons: np.ndarray  # (H, W) uint8 of MaskReason values

    @property
    def valid(self) -> np.ndarray:
        return self.reasons == MaskReason.VALID

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.reasons == MaskReason.VALID))


@dataclass
class ViewPair:
    """Reference/nearby cameras with rendered buffers and ground-truth images."""

    ref_cam: Camera
    near_cam: Camera
    ref_buffers: RenderBuffers
    near_buffers: RenderBuffers
    ref_image: np.ndarray
    near_image: np.ndarray
    rel: RelativePose

    @classmethod
    def create(cls, ref_cam, near_cam, ref_buffers, near_buffers,
               ref_image, near_image) -> "ViewPair":
        pair = cls(ref_cam, near_cam, ref_buffers, near_buffers,
                   np.asarray(ref_image, dtype=np.float64),
                   np.asarray(near_image, dtype=np.float64),
                   relative_pose(ref_cam, near_cam))
        pair.validate()
        return pair

    def validate(self):
        for cam, buf, img, tag in (
            (self.ref_cam, self.ref_buffers, self.ref_image, "ref"),
            (self.near_cam, self.near_buffers, self.near_image, "near"),
        ):
            shape = (cam.intrinsics.height, cam.intrinsics.width)
            if buf.color.shape[:2] != shape or img.shape[:2] != shape:
                raise DomainError(f"{tag} buffers/image do not match camera size")


@dataclass
class LossResult:
    value: float
    adjoint_ref: MapAdjoints
    adjoint_near: MapAdjoints
    mask: PixelValidityMask
    empty: bool = False
    residual: np.ndarray | None = field(default=None, repr=False)


def _normalize_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=-1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[..., None], norms


def per_pixel_homography(pair: ViewPair, p_r, plane_eps: float = DEFAULT_PLANE_EPS) -> np.ndarray:
    """Homography induced by the rendered plane at integer reference pixel p_r."""
    u, v = int(p_r[0]), int(p_r[1])
    n_raw = pair.ref_buffers.normal[v, u]
    norm = np.linalg.norm(n_raw)
    if norm < NORMAL_EPS:
        raise DomainError("rendered normal is degenerate at this pixel")
    d_r = float(pair.ref_buffers.distance[v, u])
    return plane_homography(
        pair.rel, pair.ref_cam.intrinsics, pair.near_cam.intrinsics,
        n_raw / norm, d_r, plane_eps=plane_eps,
    )


class _WarpSetup:
    """Shared per-pair pixel warp: rendered plane -> homography -> nearby pixel.

    All arrays are flattened over reference pixels (C order, index v*W+u).
    """

    def __init__(self, pair: ViewPair, plane_eps: float):
        ref, near = pair.ref_buffers, pair.near_buffers
        intr_r, intr_n = pair.ref_cam.intrinsics, pair.near_cam.intrinsics
        H, W = intr_r.height, intr_r.width
        self.shape = (H, W)
        self.near_shape = (intr_n.height, intr_n.width)
        self.reasons = np.zeros(H * W, dtype=np.uint8)

        self.rays = ray_grid(intr_r).reshape(-1, 3)
        n_raw = ref.normal.reshape(-1, 3)
        self.n_hat, self.n_norm = _normalize_rows(n_raw)
        self.d_r = ref.distance.reshape(-1)
        self.ref_depth = ref.depth.reshape(-1)

        self._set(~ref.depth_valid.reshape(-1), MaskReason.INVALID_DEPTH)
        self._set(self.n_norm < NORMAL_EPS, MaskReason.GRAZING_NORMAL)
        self._set(np.abs(self.d_r) < plane_eps, MaskReason.GRAZING_NORMAL)

        # h = K_n R K_r^-1 p~  +  (n . K_r^-1 p~ / d) K_n T
        self.B = intr_n.matrix @ pair.rel.rotation
        self.b = intr_n.matrix @ pair.rel.translation
        self.Br = self.rays @ self.B.T
        with np.errstate(divide="ignore", invalid="ignore"):
            self.s = np.einsum("mi,mi->m", self.n_hat, self.rays) / np.where(
                self.d_r != 0, self.d_r, 1.0
            )
        self.h = self.Br + self.s[:, None] * self.b
        self._set(self.h[:, 2] < 1e-12, MaskReason.OUT_OF_BOUNDS)
        safe_h2 = np.where(np.abs(self.h[:, 2]) > 1e-12, self.h[:, 2], 1.0)
        self.p_n = self.h[:, :2] / safe_h2[:, None]

        self.sampler = BilinearSampler(self.p_n, intr_n.height, intr_n.width)
        self._set(~self.sampler.valid, MaskReason.OUT_OF_BOUNDS)

    def _set(self, where: np.ndarray, reason: MaskReason):
        self.reasons[(self.reasons == MaskReason.VALID) & where] = reason

    def dpn_dh(self, sel: np.ndarray) -> np.ndarray:
        """(M, 2, 3) Jacobian of the dehomogenization at selected pixels."""
        h = self.h[sel]
        out = np.zeros((len(h), 2, 3))
        out[:, 0, 0] = 1.0 / h[:, 2]
        out[:, 1, 1] = 1.0 / h[:, 2]
        out[:, 0, 2] = -h[:, 0] / h[:, 2] ** 2
        out[:, 1, 2] = -h[:, 1] / h[:, 2] ** 2
        return out

    def scatter_warp_grads(self, sel: np.ndarray, g_pn: np.ndarray,
                           adj: MapAdjoints):
        """Chain d(loss)/d(p_n) back to the reference normal/distance maps."""
        g_h = np.einsum("mji,mj->mi", self.dpn_dh(sel), g_pn)
        g_s = g_h @ self.b
        d = self.d_r[sel]
        g_nhat = g_s[:, None] * self.rays[sel] / d[:, None]
        g_dr = -g_s * self.s[sel] / d
        # normalize chain: n_hat = n_raw / |n_raw|
        nh = self.n_hat[sel]
        nn = self.n_norm[sel]
        g_nraw = (g_nhat - nh * np.einsum("mi,mi->m", nh, g_nhat)[:, None]) / nn[:, None]
        H, W = self.shape
        iv, iu = np.divmod(np.nonzero(sel)[0], W)
        np.add.at(adj.normal, (iv, iu), g_nraw)
        np.add.at(adj.distance, (iv, iu), g_dr)


def _occlusion_mask(setup: _WarpSetup, near: RenderBuffers, P_rn_z: np.ndarray,
                    sel: np.ndarray, dist_threshold: float) -> np.ndarray:
    """True where the warped point is hidden behind the nearby surface."""
    near_depth = setup.sampler.sample(near.depth)
    return P_rn_z > near_depth[sel] + dist_threshold


def mdrr_loss(pair: ViewPair,
              dist_threshold: float = DEFAULT_DIST_THRESHOLD,
              plane_eps: float = DEFAULT_PLANE_EPS) -> LossResult:
    """Multi-view distance reprojection loss with exact map adjoints."""
    setup = _WarpSetup(pair, plane_eps)
    near = pair.near_buffers
    H, W = setup.shape
    nH, nW = setup.near_shape

    # Nearby-view samples must interpolate between valid-depth pixels.
    near_ok = setup.sampler.corners_all_true(near.depth_valid)
    setup._set(~near_ok, MaskReason.INVALID_DEPTH)

    v_raw = setup.sampler.sample(near.normal)
    v_hat, v_norm = _normalize_rows(v_raw)
    setup._set(v_norm < NORMAL_EPS, MaskReason.GRAZING_NORMAL)

    P_r = setup.ref_depth[:, None] * setup.rays
    P_rn = P_r @ pair.rel.rotation.T + pair.rel.translation
    d_rn = np.einsum("mi,mi->m", v_hat, P_rn)
    d_n = setup.sampler.sample(near.distance)
    resid = d_rn - d_n

    live = setup.reasons == MaskReason.VALID
    occluded = np.zeros(H * W, dtype=bool)
    occluded[live] = _occlusion_mask(setup, near, P_rn[live, 2], live, dist_threshold)
    setup._set(occluded, MaskReason.OCCLUDED)
    setup._set(np.abs(resid) > dist_threshold, MaskReason.RESIDUAL_EXCEEDED)

    mask = PixelValidityMask(setup.reasons.reshape(H, W))
    adj_ref = MapAdjoints.zeros(H, W)
    adj_near = MapAdjoints.zeros(nH, nW)
    valid = setup.reasons == MaskReason.VALID
    count = int(np.count_nonzero(valid))
    resid_map = np.where(valid, resid, 0.0).reshape(H, W)
    if count == 0:
        return LossResult(0.0, adj_ref, adj_near, mask, empty=True,
                          residual=resid_map)

    value = float(np.sum(resid[valid] ** 2) / count)
    g_res = np.zeros(H * W)
    g_res[valid] = 2.0 * resid[valid] / count

    sel = valid
    iv, iu = np.divmod(np.nonzero(sel)[0], W)
    g_r = g_res[sel]

    # d resid / d (reference depth): through P_r = depth * ray.
    g_Prn = g_r[:, None] * v_hat[sel]
    g_Pr = g_Prn @ pair.rel.rotation
    adj_ref.depth[iv, iu] += np.einsum("mi,mi->m", g_Pr, setup.rays[sel])

    # d resid / d (nearby normal and distance) at fixed warp position.
    vh, vn = v_hat[sel], v_norm[sel]
    g_vhat = g_r[:, None] * P_rn[sel]
    g_vraw = (g_vhat - vh * np.einsum("mi,mi->m", vh, g_vhat)[:, None]) / vn[:, None]
    sub = _subset_sampler(setup.sampler, sel)
    sub.scatter(adj_near.normal, g_vraw)
    sub.scatter(adj_near.distance, -g_r)

    # d resid / d (warp position), chained to the reference plane maps.
    dn_du, dn_dv = sub.sample_spatial_grad(near.distance)
    vr_du, vr_dv = sub.sample_spatial_grad(near.normal)
    # v_hat position sensitivity through the normalization.
    proj = g_vhat - vh * np.einsum("mi,mi->m", vh, g_vhat)[:, None]
    g_pn = np.stack(
        [
            np.einsum("mi,mi->m", proj, vr_du) / vn - g_r * dn_du,
            np.einsum("mi,mi->m", proj, vr_dv) / vn - g_r * dn_dv,
        ],
        axis=1,
    )
    setup.scatter_warp_grads(sel, g_pn, adj_ref)

    return LossResult(value, adj_ref, adj_near, mask, residual=resid_map)


def _subset_sampler(sampler: BilinearSampler, sel: np.ndarray) -> BilinearSampler:
    """View of a sampler restricted to selected points (no revalidation)."""
    sub = BilinearSampler.__new__(BilinearSampler)
    sub.valid = sampler.valid[sel]
    sub.x0 = sampler.x0[sel]
    sub.y0 = sampler.y0[sel]
    sub.wx = sampler.wx[sel]
    sub.wy = sampler.wy[sel]
    sub.height = sampler.height
    sub.width = sampler.width
    return sub


def plaquette_normal(depth: np.ndarray, intr: CameraIntrinsics, p,
                     valid: np.ndarray | None = None):
    """Depth-derived surface normal at integer pixel p, or None if masked.

    Back-projects the four axis neighbors (left/right/up/down at +-1 px)
    and returns the normalized cross product of the two central-difference
    tangents.
    """
    u, v = int(p[0]), int(p[1])
    H, W = depth.shape
    if not (1 <= u < W - 1 and 1 <= v < H - 1):
        return None
    neighbors = [(u - 1, v), (u + 1, v), (u, v - 1), (u, v + 1)]
    if valid is not None and not all(valid[vv, uu] for uu, vv in neighbors):
        return None
    if any(depth[vv, uu] <= 0 for uu, vv in neighbors):
        return None
    rays = ray_grid(intr)
    P = [depth[vv, uu] * rays[vv, uu] for uu, vv in neighbors]
    c = np.cross(P[1] - P[0], P[3] - P[2])
    norm = np.linalg.norm(c)
    if norm < CROSS_EPS:
        return None
    return c / norm


def plaquette_normal_map(depth: np.ndarray, valid: np.ndarray,
                         intr: CameraIntrinsics):
    """Vectorized plaquette normals for a whole depth map.

    Returns (normals (H, W, 3), reasons (H, W) uint8) where reasons uses
    MaskReason codes (border pixels count as out-of-bounds).
    """
    H, W = depth.shape
    rays = ray_grid(intr)
    P = depth[:, :, None] * rays
    a = np.zeros((H, W, 3))
    b = np.zeros((H, W, 3))
    a[:, 1:-1] = P[:, 2:] - P[:, :-2]
    b[1:-1, :] = P[2:, :] - P[:-2, :]
    c = np.cross(a, b)
    norm = np.linalg.norm(c, axis=-1)
    normals = c / np.where(norm > 0, norm, 1.0)[:, :, None]

    reasons = np.full((H, W), MaskReason.OUT_OF_BOUNDS, dtype=np.uint8)
    reasons[1:-1, 1:-1] = MaskReason.VALID
    nb_ok = np.zeros((H, W), dtype=bool)
    nb_ok[1:-1, 1:-1] = (valid[1:-1, 2:] & valid[1:-1, :-2]
                         & valid[2:, 1:-1] & valid[:-2, 1:-1])
    sel = (reasons == MaskReason.VALID) & ~nb_ok
    reasons[sel] = MaskReason.INVALID_DEPTH
    sel = (reasons == MaskReason.VALID) & (norm < CROSS_EPS)
    reasons[sel] = MaskReason.GRAZING_NORMAL
    return normals, reasons


def plaquette_backward(depth: np.ndarray, intr: CameraIntrinsics,
                       iv: np.ndarray, iu: np.ndarray, g_n: np.ndarray,
                       adj_depth: np.ndarray):
    """Scatter d(loss)/d(plaquette normal) into the depth-map adjoint."""
    rays = ray_grid(intr)
    nb = [(iv, iu - 1), (iv, iu + 1), (iv - 1, iu), (iv + 1, iu)]
    P = [depth[v, u][:, None] * rays[v, u] for v, u in nb]
    a = P[1] - P[0]
    bb = P[3] - P[2]
    c = np.cross(a, bb)
    norm = np.linalg.norm(c, axis=1)
    n = c / norm[:, None]
    g_c = (g_n - n * np.einsum("mi,mi->m", n, g_n)[:, None]) / norm[:, None]
    g_a = np.cross(bb, g_c)
    g_b = np.cross(g_c, a)
    for (v, u), g_P in zip(nb, (-g_a, g_a, -g_b, g_b)):
        np.add.at(adj_depth, (v, u), np.einsum("mi,mi->m", g_P, rays[v, u]))


def mne_loss(pair: ViewPair,
             nor_threshold: float = DEFAULT_NOR_THRESHOLD,
             dist_threshold: float = DEFAULT_DIST_THRESHOLD,
             plane_eps: float = DEFAULT_PLANE_EPS,
             weight_mode: str = "edges") -> LossResult:
    """Multi-view normal enhancement loss with exact map adjoints.

    ``weight_mode='edges'`` uses the literal |grad I|^5 pixel weight
    (up-weighting edges); ``'flats'`` uses (1 - |grad I|)^5.
    """
    if weight_mode not in ("edges", "flats"):
        raise ConfigurationError(f"unknown weight_mode {weight_mode!r}")
    setup = _WarpSetup(pair, plane_eps)
    ref, near = pair.ref_buffers, pair.near_buffers
    intr_r, intr_n = pair.ref_cam.intrinsics, pair.near_cam.intrinsics
    H, W = setup.shape
    nH, nW = setup.near_shape

    n1_map, reasons1 = plaquette_normal_map(ref.depth, ref.depth_valid, intr_r)
    flat1 = reasons1.reshape(-1)
    upgrade = (setup.reasons == MaskReason.VALID) & (flat1 != MaskReason.VALID)
    setup.reasons[upgrade] = flat1[upgrade]

    # Nearby plaquette anchored at the pixel nearest to the warp target.
    qu = np.round(setup.p_n[:, 0] - 0.5).astype(np.int64)
    qv = np.round(setup.p_n[:, 1] - 0.5).astype(np.int64)
    inb = (qu >= 1) & (qu < nW - 1) & (qv >= 1) & (qv < nH - 1)
    setup._set(~inb, MaskReason.OUT_OF_BOUNDS)
    qu, qv = np.clip(qu, 1, nW - 2), np.clip(qv, 1, nH - 2)

    n2_map, reasons2 = plaquette_normal_map(near.depth, near.depth_valid, intr_n)
    r2 = reasons2[qv, qu]
    upgrade = (setup.reasons == MaskReason.VALID) & (r2 != MaskReason.VALID)
    setup.reasons[upgrade] = r2[upgrade]

    # Occlusion test against the nearby rendered depth.
    near_ok = setup.sampler.corners_all_true(near.depth_valid)
    setup._set(~near_ok, MaskReason.INVALID_DEPTH)
    live = setup.reasons == MaskReason.VALID
    P_rn_z = (setup.ref_depth[:, None] * setup.rays) @ pair.rel.rotation[2] \
        + pair.rel.translation[2]
    occluded = np.zeros(H * W, dtype=bool)
    occluded[live] = _occlusion_mask(setup, near, P_rn_z[live], live, dist_threshold)
    setup._set(occluded, MaskReason.OCCLUDED)

    n1 = n1_map.reshape(-1, 3)
    rho = n1 @ pair.rel.rotation.T - n2_map[qv, qu]
    rho_norm = np.linalg.norm(rho, axis=1)
    setup._set(rho_norm > nor_threshold, MaskReason.RESIDUAL_EXCEEDED)

    g = gradient_magnitude(luminance(pair.ref_image)).reshape(-1)
    weights = g**5 if weight_mode == "edges" else (1.0 - g) ** 5

    mask = PixelValidityMask(setup.reasons.reshape(H, W))
    adj_ref = MapAdjoints.zeros(H, W)
    adj_near = MapAdjoints.zeros(nH, nW)
    valid = setup.reasons == MaskReason.VALID
    count = int(np.count_nonzero(valid))
    rho_map = np.where(valid, rho_norm, 0.0).reshape(H, W)
    if count == 0:
        return LossResult(0.0, adj_ref, adj_near, mask, empty=True,
                          residual=rho_map)

    value = float(np.sum(weights[valid] * rho_norm[valid]) / count)

    sel = valid & (rho_norm > CROSS_EPS)
    if np.any(sel):
        g_rho = (weights[sel] / count / rho_norm[sel])[:, None] * rho[sel]
        g_n1 = g_rho @ pair.rel.rotation
        iv, iu = np.divmod(np.nonzero(sel)[0], W)
        plaquette_backward(ref.depth, intr_r, iv, iu, g_n1, adj_ref.depth)
        plaquette_backward(near.depth, intr_n, qv[sel], qu[sel], -g_rho,
                           adj_near.depth)

    return LossResult(value, adj_ref, adj_near, mask, residual=rho_map)


def select_neighbor(cameras, ref_index: int,
                    min_baseline: float = 0.01,
                    max_baseline: float = 10.0) -> int:
    """Pick the best nearby view: small optical-axis angle, baseline in range.

    Deterministic tie-break by lower index.
    """
    if len(cameras) < 2:
        raise ConfigurationError("neighbor selection needs at least 2 cameras")
    ref = cameras[ref_index]
    c_ref = ref.pose.center
    z_ref = ref.optical_axis_world
    best = (np.inf, -1)
    for i, cam in enumerate(cameras):
        if i == ref_index:
            continue
        baseline = float(np.linalg.norm(cam.pose.center - c_ref))
        angle = float(np.arccos(np.clip(cam.optical_axis_world @ z_ref, -1, 1)))
        penalty = 0.0
        if baseline < min_baseline:
            penalty += 10.0 * (min_baseline - baseline) / max(min_baseline, 1e-12)
        if baseline > max_baseline:
            penalty += 10.0 * (baseline - max_baseline) / max(max_baseline, 1e-12)
        score = angle + penalty
        if score < best[0]:
            best = (score, i)
    return best[1]
