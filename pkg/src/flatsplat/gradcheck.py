"""Finite-difference validation of every analytic gradient path.

Builds a near-consistent noisy-plane scene (so the thresholded multi-view
losses keep a meaningful set of valid pixels), then sweeps every Gaussian
parameter with central differences and compares against the composed
analytic gradients of each loss term.
"""

from __future__ import annotations

import numpy as np

from .geometry import Camera, CameraIntrinsics, look_at_pose
from .renderer import MapAdjoints, render, render_backward
from .regularizers import ViewPair, mdrr_loss, mne_loss
from .rng import make_rng
from .scene import GaussianScene
from .synthetic import SyntheticSpec, render_analytic
from .trainer import mvrgb_loss_stub, photometric_loss, svgeo_loss_stub

LOSSES = ("photometric", "svgeo", "mvrgb", "dist", "nor")
PARAM_GROUPS = ("positions", "quaternions", "scales", "opacities", "colors")


def make_fixture(seed: int = 7, n_gaussians: int = 10, size: int = 16):
    """Random jittered stack of large near-coplanar Gaussians.

    The layout keeps every pixel far from the rasterizer's hard cutoffs
    (every Gaussian covers the whole frame well inside its 1/255 ring, no
    opacity clamping, transmittance above the termination floor, residuals
    well inside the outlier thresholds), so central differences of the
    thresholded losses stay faithful to the analytic derivatives.
    """
    rng = make_rng(seed, "gradcheck_scene")
    n = n_gaussians
    pos = np.stack([
        rng.uniform(-0.15, 0.15, n),
        rng.uniform(-0.15, 0.15, n),
        rng.normal(0, 3e-3, n),
    ], axis=1)
    # Orientation jitter keeps normal residuals far from both the ||.||
    # singularity at zero and the outlier thresholds.
    q = np.concatenate([np.ones((n, 1)), rng.normal(0, 0.02, (n, 3))], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s01 = rng.uniform(2.5, 3.5, (n, 2))
    s2 = rng.uniform(2e-3, 5e-3, (n, 1)) * s01.min(axis=1, keepdims=True)
    # Opacity scales with stack depth so accumulated transmittance stays a
    # safe factor above the 1e-4 termination floor; scene colors and the
    # target texture live in disjoint ranges so the L1 photometric term
    # never crosses a sign change during the sweep.
    a_max = 1.0 - (5e-4) ** (1.0 / n)
    scene = GaussianScene(
        pos, q, np.concatenate([s01, s2], axis=1),
        rng.uniform(0.8 * a_max, a_max, n), rng.uniform(0.72, 0.95, (n, 3)),
        background=(0.25, 0.3, 0.35),
    )
    f = size * 1.6
    intr = CameraIntrinsics(fx=f, fy=f * 0.97, cx=size * 0.51, cy=size * 0.49,
                            width=size, height=size)
    cams = [
        Camera(intr, look_at_pose((2.5, 0.6, 2.2), (0, 0, 0))),
        Camera(intr, look_at_pose((2.42, 0.75, 2.25), (0, 0, 0))),
    ]
    # Consistent textured targets (same analytic plane seen from both views).
    tex = SyntheticSpec(shape="plane", extent=16.0, texture="checker",
                        cell=0.45, softness=0.3, seed=seed,
                        color0=(0.12, 0.2, 0.32), color1=(0.45, 0.5, 0.4))
    images = [render_analytic(tex, cam)[0] for cam in cams]
    return scene, cams, images


def _loss_value_and_adjoints(scene, cams, images, which: str):
    c1, c2 = cams
    b1 = render(scene, c1)
    if which == "photometric":
        val, g = photometric_loss(b1.color, images[0])
        adj = MapAdjoints.zeros(b1.height, b1.width)
        adj.color += g
        return val, [(c1, b1, adj)]
    if which == "svgeo":
        val, adj = svgeo_loss_stub(b1, images[0], c1)
        return val, [(c1, b1, adj)]
    b2 = render(scene, c2)
    pair = ViewPair.create(c1, c2, b1, b2, images[0], images[1])
    if which == "mvrgb":
        val, adj = mvrgb_loss_stub(pair)
        return val, [(c1, b1, adj)]
    if which == "dist":
        res = mdrr_loss(pair)
        return res.value, [(c1, b1, res.adjoint_ref), (c2, b2, res.adjoint_near)]
    if which == "nor":
        res = mne_loss(pair)
        return res.value, [(c1, b1, res.adjoint_ref), (c2, b2, res.adjoint_near)]
    raise ValueError(f"unknown loss {which!r}")


def loss_value(scene, cams, images, which: str) -> float:
    return _loss_value_and_adjoints(scene, cams, images, which)[0]


def analytic_gradients(scene, cams, images, which: str):
    _, packs = _loss_value_and_adjoints(scene, cams, images, which)
    grads = None
    for cam, buf, adj in packs:
        g = render_backward(scene, cam, buf, adj)
        grads = g if grads is None else grads.add(g)
    return grads


def check_loss_gradients(scene, cams, images, which: str, step: float = 1e-4):
    """Max |fd - analytic| discrepancy ratio against max(rel, abs) tolerance.

    Returns (max_ratio, worst_descriptor, value); a ratio <= 1 passes at
    tolerances (1e-3 relative, 1e-6 absolute).
    """
    grads = analytic_gradients(scene, cams, images, which)
    value = loss_value(scene, cams, images, which)
    worst = (0.0, "")
    for group in PARAM_GROUPS:
        arr = getattr(scene, group)
        gar = np.asarray(getattr(grads, group))
        flat = arr.reshape(-1)
        gflat = gar.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            vp = loss_value(scene, cams, images, which)
            flat[i] = old - step
            vm = loss_value(scene, cams, images, which)
            flat[i] = old
            fd = (vp - vm) / (2 * step)
            an = gflat[i]
            tol = max(1e-3 * max(abs(fd), abs(an)), 1e-6)
            ratio = abs(fd - an) / tol
            if ratio > worst[0]:
                worst = (ratio, f"{group}[{i}] fd={fd:.6g} analytic={an:.6g}")
    return worst[0], worst[1], value


def run_gradient_suite(seed: int = 7, n_gaussians: int = 10, size: int = 16,
                       step: float = 1e-4, losses=LOSSES, report=print):
    """Full finite-difference suite; returns {loss: (ratio, detail, value)}."""
    scene, cams, images = make_fixture(seed, n_gaussians, size)
    results = {}
    for which in losses:
        ratio, detail, value = check_loss_gradients(scene, cams, images, which, step)
        results[which] = (ratio, detail, value)
        if report is not None:
            status = "ok" if ratio <= 1.0 else "FAIL"
            report(f"  {which:12s} value={value:.6g} worst_ratio={ratio:.4f} "
                   f"[{status}] {detail}")
    return results
