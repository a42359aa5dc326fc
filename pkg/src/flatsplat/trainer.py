"""End-to-end optimization: losses, weighting schedule, Adam loop.

The total objective is the photometric term (0.8 L1 + 0.2 DSSIM, the
standard splatting image loss) plus four weighted geometric terms that
switch on after ``geometric_phase_start``: a single-view normal
consistency stub, a multi-view patch NCC stub, and the two multi-view
losses from :mod:`flatsplat.regularizers`.  All adjoints are composed into
per-map adjoints for each rendered view and pushed through
``render_backward`` once per view.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ContractViolationError, TrainingDivergedError
from .geometry import Camera, ray_grid
from .imgops import LUMA_WEIGHTS, gradient_magnitude, luminance
from .interp import BilinearSampler
from .metrics import ssim_and_grad, SSIM_RADIUS
from .regularizers import (
    DEFAULT_DIST_THRESHOLD,
    DEFAULT_NOR_THRESHOLD,
    DEFAULT_PLANE_EPS,
    CROSS_EPS,
    NORMAL_EPS,
    MapAdjoints,
    MaskReason,
    ViewPair,
    _WarpSetup,
    mdrr_loss,
    mne_loss,
    plaquette_backward,
    plaquette_normal_map,
    select_neighbor,
)
from .renderer import RenderBuffers, SplatGradients, render, render_backward
from .scene import GaussianScene

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

PATCH_RADIUS = 3  # 7x7 NCC patches
PATCH_VAR_FLOOR = 1e-8

LOSS_NAMES = ("photometric", "svgeo", "mvrgb", "dist", "nor")


@dataclass
class LossWeights:
    """Weights and outlier thresholds of the geometric loss terms."""

    svgeo: float = 0.015
    mvrgb: float = 0.15
    dist: float = 0.03
    nor: float = 0.015
    dist_threshold: float = DEFAULT_DIST_THRESHOLD
    nor_threshold: float = DEFAULT_NOR_THRESHOLD

    def __post_init__(self):
        for name in ("svgeo", "mvrgb", "dist", "nor"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"weight {name} must be nonnegative")
        if self.dist_threshold <= 0 or self.nor_threshold <= 0:
            raise ConfigurationError("thresholds must be positive")


@dataclass
class TrainConfig:
    total_iters: int = 1000
    geometric_phase_start: int = 300
    lr_position: float = 1.6e-4
    lr_quaternion: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    position_lr_final_ratio: float = 0.01  # exponential decay target at total_iters
    prune_opacity_threshold: float = 0.005
    prune_interval: int = 100
    min_baseline: float = 0.01
    max_baseline: float = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mne_weight_mode: str = "edges"
    plane_eps: float = DEFAULT_PLANE_EPS

    def __post_init__(self):
        if not (0 <= self.geometric_phase_start <= self.total_iters):
            raise ConfigurationError(
                "geometric_phase_start must lie in [0, total_iters]"
            )

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """The full-resolution schedule: 7k photometric + 23k full iterations."""
        kw = dict(total_iters=30000, geometric_phase_start=7000)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        weights = data.pop("weights", None)
        cfg = cls(**data)
        if weights is not None:
            cfg.weights = LossWeights(**weights)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def position_lr(self, iteration: int) -> float:
        t = min(max(iteration, 0), self.total_iters) / max(self.total_iters, 1)
        return self.lr_position * self.position_lr_final_ratio**t


@dataclass
class TrainState:
    scene: GaussianScene
    iteration: int
    history: deque  # rows: dict with iteration + loss components
    adam_m: dict
    adam_v: dict
    adam_t: int


def photometric_loss(rendered: np.ndarray, gt: np.ndarray):
    """0.8 L1 + 0.2 (1 - SSIM) with its exact adjoint w.r.t. the render."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ContractViolationError(
            f"image shapes differ: {rendered.shape} vs {gt.shape}"
        )
    diff = rendered - gt
    l1 = float(np.mean(np.abs(diff)))
    g = 0.8 * np.sign(diff) / diff.size

    # SSIM on luminance; window shrinks for tiny images (metrics.ssim stays
    # strict at 11x11, the loss must remain defined on small fixtures).
    radius = min(SSIM_RADIUS, (min(rendered.shape[:2]) - 1) // 2)
    x, y = luminance(rendered), luminance(gt)
    ssim_val, g_ssim = ssim_and_grad(x, y, radius)
    value = 0.8 * l1 + 0.2 * (1.0 - ssim_val)
    g += 0.2 * (-g_ssim)[:, :, None] * LUMA_WEIGHTS
    return value, g


def svgeo_loss_stub(buffers: RenderBuffers, image: np.ndarray, cam: Camera):
    """Single-view consistency between rendered and depth-derived normals.

    Edge-weighted ((1-g)^5) mean norm of the difference between the
    normalized rendered normal and the plaquette normal of the view's own
    depth map, both oriented toward the camera.
    """
    intr = cam.intrinsics
    H, W = intr.height, intr.width
    adj = MapAdjoints.zeros(H, W)

    n_raw = buffers.normal
    n_norm = np.linalg.norm(n_raw, axis=-1)
    nd, reasons = plaquette_normal_map(buffers.depth, buffers.depth_valid, intr)
    rays = ray_grid(intr)
    facing = np.einsum("hwc,hwc->hw", nd, rays)
    valid = (
        (reasons == MaskReason.VALID)
        & (n_norm > NORMAL_EPS)
        & (np.abs(facing) > 1e-9)
    )
    count = int(np.count_nonzero(valid))
    if count == 0:
        return 0.0, adj

    flip = np.where(facing > 0, -1.0, 1.0)  # orient toward the camera
    nr = n_raw / np.where(n_norm > 0, n_norm, 1.0)[:, :, None]
    d = nr - flip[:, :, None] * nd
    dnorm = np.linalg.norm(d, axis=-1)

    g = gradient_magnitude(luminance(image))
    w = (1.0 - g) ** 5
    value = float(np.sum(w[valid] * dnorm[valid]) / count)

    sel = valid & (dnorm > CROSS_EPS)
    if np.any(sel):
        iv, iu = np.nonzero(sel)
        g_d = (w[sel] / count / dnorm[sel])[:, None] * d[sel]
        nh = nr[sel]
        g_nraw = (g_d - nh * np.einsum("mi,mi->m", nh, g_d)[:, None]) \
            / n_norm[sel][:, None]
        np.add.at(adj.normal, (iv, iu), g_nraw)
        g_nd = -flip[sel][:, None] * g_d
        plaquette_backward(buffers.depth, intr, iv, iu, g_nd, adj.depth)
    return value, adj


def mvrgb_loss_stub(pair: ViewPair, plane_eps: float = DEFAULT_PLANE_EPS,
                    dist_threshold: float = DEFAULT_DIST_THRESHOLD):
    """Patch NCC photometric consistency across the pair (PGSR-style stand-in).

    Mean (1 - NCC) between 7x7 grayscale ground-truth patches around each
    valid reference pixel and their homography warps in the nearby image.
    Gradients flow through the warp, i.e. into the reference rendered
    normal/distance maps only.
    """
    setup = _WarpSetup(pair, plane_eps)
    near = pair.near_buffers
    intr_n = pair.near_cam.intrinsics
    H, W = setup.shape
    adj = MapAdjoints.zeros(H, W)

    # Patch interior margin on the reference side.
    r = PATCH_RADIUS
    border = np.ones((H, W), dtype=bool)
    border[r:H - r, r:W - r] = False
    setup._set(border.reshape(-1), MaskReason.OUT_OF_BOUNDS)

    near_ok = setup.sampler.corners_all_true(near.depth_valid)
    setup._set(~near_ok, MaskReason.INVALID_DEPTH)
    live = setup.reasons == MaskReason.VALID
    P_rn_z = (setup.ref_depth[:, None] * setup.rays) @ pair.rel.rotation[2] \
        + pair.rel.translation[2]
    near_depth = setup.sampler.sample(near.depth)
    occ = np.zeros(H * W, dtype=bool)
    occ[live] = P_rn_z[live] > near_depth[live] + dist_threshold
    setup._set(occ, MaskReason.OCCLUDED)

    sel = setup.reasons == MaskReason.VALID
    idx = np.nonzero(sel)[0]
    if idx.size == 0:
        return 0.0, adj
    iv, iu = np.divmod(idx, W)

    gray_ref = luminance(pair.ref_image)
    gray_near = luminance(pair.near_image)
    dv, du = np.mgrid[-r:r + 1, -r:r + 1]
    du = du.reshape(-1)
    dv = dv.reshape(-1)
    P = du.size

    f = gray_ref[iv[:, None] + dv[None, :], iu[:, None] + du[None, :]]  # (M, P)

    # Warp every patch sample with the center pixel's plane homography.
    rays = setup.rays.reshape(H, W, 3)
    r_l = rays[iv[:, None] + dv[None, :], iu[:, None] + du[None, :]]  # (M, P, 3)
    n_hat = setup.n_hat[idx]
    d_c = setup.d_r[idx]
    s_l = np.einsum("mi,mpi->mp", n_hat, r_l) / d_c[:, None]
    h_l = np.einsum("ij,mpj->mpi", setup.B, r_l) + s_l[:, :, None] * setup.b

    h2_ok = h_l[:, :, 2] > 1e-12
    safe_h2 = np.where(h2_ok, h_l[:, :, 2], 1.0)
    p_l = h_l[:, :, :2] / safe_h2[:, :, None]
    sampler = BilinearSampler(p_l.reshape(-1, 2), intr_n.height, intr_n.width)
    patch_ok = (h2_ok.all(axis=1)) & sampler.valid.reshape(-1, P).all(axis=1)

    g_s = sampler.sample(gray_near).reshape(-1, P)  # (M, P)

    F = f - f.mean(axis=1, keepdims=True)
    G = g_s - g_s.mean(axis=1, keepdims=True)
    S_ff = np.einsum("mp,mp->m", F, F)
    S_gg = np.einsum("mp,mp->m", G, G)
    S_fg = np.einsum("mp,mp->m", F, G)
    textured = (S_ff > PATCH_VAR_FLOOR) & (S_gg > PATCH_VAR_FLOOR)

    usable = patch_ok & textured
    # Record rejections (textureless counts as residual-type rejection).
    rej = np.zeros(idx.size, dtype=np.uint8)
    rej[~patch_ok] = MaskReason.OUT_OF_BOUNDS
    rej[patch_ok & ~textured] = MaskReason.RESIDUAL_EXCEEDED
    setup.reasons[idx[~usable]] = rej[~usable]

    if not np.any(usable):
        return 0.0, adj
    count = int(np.count_nonzero(usable))

    D = np.sqrt(S_ff * S_gg)
    ncc = np.where(usable, S_fg / np.where(usable, D, 1.0), 0.0)
    value = float(np.sum(1.0 - ncc[usable]) / count)

    # d value / d g_l  (only through the warped samples).
    u_idx = np.nonzero(usable)[0]
    dncc_dG = (F[u_idx] / D[u_idx, None]
               - ncc[u_idx, None] * G[u_idx] / S_gg[u_idx, None])
    dncc_dg = dncc_dG - dncc_dG.mean(axis=1, keepdims=True)
    g_gl = -(1.0 / count) * dncc_dg  # (Mu, P)

    # position chain: d g_l / d p_l, then p_l -> h_l -> (n_hat, d) at center.
    flat_sel = (u_idx[:, None] * P + np.arange(P)[None, :]).reshape(-1)
    sub = _take_sampler(sampler, flat_sel)
    s_du, s_dv = sub.sample_spatial_grad(gray_near)
    g_pl = np.stack([g_gl.reshape(-1) * s_du, g_gl.reshape(-1) * s_dv], axis=1)

    h_sel = h_l[u_idx].reshape(-1, 3)
    g_h = np.empty((len(h_sel), 3))
    g_h[:, 0] = g_pl[:, 0] / h_sel[:, 2]
    g_h[:, 1] = g_pl[:, 1] / h_sel[:, 2]
    g_h[:, 2] = -(g_pl[:, 0] * h_sel[:, 0] + g_pl[:, 1] * h_sel[:, 1]) \
        / h_sel[:, 2] ** 2
    g_sl = (g_h @ setup.b).reshape(-1, P)

    rl_sel = r_l[u_idx]
    d_sel = d_c[u_idx]
    g_nhat = np.einsum("mp,mpi->mi", g_sl, rl_sel) / d_sel[:, None]
    g_dc = -np.einsum("mp,mp->m", g_sl, s_l[u_idx]) / d_sel

    nh = n_hat[u_idx]
    nn = setup.n_norm[idx[u_idx]]
    g_nraw = (g_nhat - nh * np.einsum("mi,mi->m", nh, g_nhat)[:, None]) / nn[:, None]
    np.add.at(adj.normal, (iv[u_idx], iu[u_idx]), g_nraw)
    np.add.at(adj.distance, (iv[u_idx], iu[u_idx]), g_dc)
    return value, adj


def _take_sampler(sampler: BilinearSampler, flat_idx: np.ndarray) -> BilinearSampler:
    sub = BilinearSampler.__new__(BilinearSampler)
    sub.valid = sampler.valid[flat_idx]
    sub.x0 = sampler.x0[flat_idx]
    sub.y0 = sampler.y0[flat_idx]
    sub.wx = sampler.wx[flat_idx]
    sub.wy = sampler.wy[flat_idx]
    sub.height = sampler.height
    sub.width = sampler.width
    return sub


def total_loss(scene: GaussianScene, cameras, images, view_index: int,
               config: TrainConfig, geometric_phase: bool):
    """Weighted objective for one reference view; returns
    (total, SplatGradients, components dict)."""
    w = config.weights
    ref_cam = cameras[view_index]
    ref_img = images[view_index]
    ref_buf = render(scene, ref_cam)
    H, W = ref_buf.color.shape[:2]

    comps = {name: 0.0 for name in LOSS_NAMES}
    adj_ref = MapAdjoints.zeros(H, W)

    comps["photometric"], g_color = photometric_loss(ref_buf.color, ref_img)
    adj_ref.color += g_color

    near_pack = None
    if geometric_phase and len(cameras) >= 2:
        ni = select_neighbor(cameras, view_index, config.min_baseline,
                             config.max_baseline)
        near_cam = cameras[ni]
        near_buf = render(scene, near_cam)
        pair = ViewPair.create(ref_cam, near_cam, ref_buf, near_buf,
                               ref_img, images[ni])
        adj_near = MapAdjoints.zeros(near_buf.height, near_buf.width)

        if w.svgeo > 0:
            comps["svgeo"], a = svgeo_loss_stub(ref_buf, ref_img, ref_cam)
            adj_ref.add_scaled(a, w.svgeo)
        if w.mvrgb > 0:
            comps["mvrgb"], a = mvrgb_loss_stub(
                pair, config.plane_eps, w.dist_threshold)
            adj_ref.add_scaled(a, w.mvrgb)
        if w.dist > 0:
            res = mdrr_loss(pair, w.dist_threshold, config.plane_eps)
            comps["dist"] = res.value
            adj_ref.add_scaled(res.adjoint_ref, w.dist)
            adj_near.add_scaled(res.adjoint_near, w.dist)
        if w.nor > 0:
            res = mne_loss(pair, w.nor_threshold, w.dist_threshold,
                           config.plane_eps, config.mne_weight_mode)
            comps["nor"] = res.value
            adj_ref.add_scaled(res.adjoint_ref, w.nor)
            adj_near.add_scaled(res.adjoint_near, w.nor)
        near_pack = (near_cam, near_buf, adj_near)

    total = (comps["photometric"] + w.svgeo * comps["svgeo"]
             + w.mvrgb * comps["mvrgb"] + w.dist * comps["dist"]
             + w.nor * comps["nor"])

    grads = render_backward(scene, ref_cam, ref_buf, adj_ref)
    if near_pack is not None:
        near_cam, near_buf, adj_near = near_pack
        grads.add(render_backward(scene, near_cam, near_buf, adj_near))
    return total, grads, comps


def _adam_step(scene: GaussianScene, grads: SplatGradients, state: TrainState,
               config: TrainConfig):
    state.adam_t += 1
    t = state.adam_t
    lrs = {
        "positions": config.position_lr(state.iteration),
        "quaternions": config.lr_quaternion,
        "scales": config.lr_scale,
        "opacities": config.lr_opacity,
        "colors": config.lr_color,
    }
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, lr in lrs.items():
        p = getattr(scene, name)
        g = getattr(grads, name)
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def _prune(state: TrainState, threshold: float):
    keep = state.scene.opacities >= threshold
    if keep.all() or not keep.any():
        return
    state.scene = state.scene.keep(keep)
    for d in (state.adam_m, state.adam_v):
        for name in d:
            d[name] = d[name][keep]


def train(config: TrainConfig, scene_init: GaussianScene, dataset,
          on_iteration=None) -> TrainState:
    """Optimize a scene against a dataset; deterministic given the config.

    ``dataset`` provides parallel ``cameras`` and ``images`` sequences.
    ``on_iteration(state, comps)`` runs after each step when given.
    """
    cameras, images = dataset.cameras, dataset.images
    if len(cameras) < 2:
        raise ConfigurationError("training needs at least 2 views")
    scene = scene_init.copy()
    zeros = lambda: {
        "positions": np.zeros_like(scene.positions),
        "quaternions": np.zeros_like(scene.quaternions),
        "scales": np.zeros_like(scene.scales),
        "opacities": np.zeros_like(scene.opacities),
        "colors": np.zeros_like(scene.colors),
    }
    state = TrainState(scene, 0, deque(maxlen=max(config.total_iters, 1)),
                       zeros(), zeros(), 0)

    for it in range(config.total_iters):
        state.iteration = it
        view = it % len(cameras)
        geometric = it >= config.geometric_phase_start
        total, grads, comps = total_loss(
            state.scene, cameras, images, view, config, geometric)
        if not np.isfinite(total) or not grads.is_finite():
            raise TrainingDivergedError(
                f"non-finite loss/gradients at iteration {it} (view {view})"
            )
        _adam_step(state.scene, grads, state, config)
        state.scene.clamp_parameters()
        if config.prune_interval > 0 and (it + 1) % config.prune_interval == 0:
            _prune(state, config.prune_opacity_threshold)
        row = {"iteration": it, "total": total}
        row.update(comps)
        state.history.append(row)
        if on_iteration is not None:
            on_iteration(state, row)
    state.iteration = config.total_iters
    return state
