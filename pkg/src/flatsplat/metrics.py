"""Evaluation metrics: Chamfer distance, mesh sampling, PSNR, SSIM.

The SSIM implementation is differentiable (exact adjoint with respect to
the first image); the trainer's photometric loss reuses the same core so
the metric and the loss can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolationError, DomainError
from .imgops import GaussianFilter2D, luminance
from .rng import make_rng

SSIM_RADIUS = 5  # 11x11 window
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise DomainError("point cloud must be a nonempty (N, 3) array")
    return pts


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbor Euclidean distance between clouds."""
    pa, pb = _points(a), _points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def sample_mesh(mesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform sampling of n points on a triangle mesh."""
    if n <= 0:
        raise DomainError("sample count must be positive")
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    if tris.shape[0] == 0:
        raise DomainError("cannot sample an empty mesh")
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise DomainError("mesh has zero total area")
    rng = make_rng(seed, "sample_mesh")
    which = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    pts = a[which] + u[:, None] * (b - a)[which] + v[:, None] * (c - a)[which]
    return PointCloud(pts)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit dynamic range; +inf when images are equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolationError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _ssim_forward(x: np.ndarray, y: np.ndarray, radius: int, sigma: float = SSIM_SIGMA):
    """Mean local SSIM of two single-channel images plus a backward cache."""
    h, w = x.shape
    filt = GaussianFilter2D(h, w, radius, sigma)
    ux, uy = filt.apply(x), filt.apply(y)
    sxx = filt.apply(x * x) - ux * ux
    syy = filt.apply(y * y) - uy * uy
    sxy = filt.apply(x * y) - ux * uy
    A1 = 2 * ux * uy + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = ux * ux + uy * uy + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    crop = (slice(radius, h - radius), slice(radius, w - radius))
    value = float(S[crop].mean())
    cache = dict(filt=filt, x=x, y=y, ux=ux, uy=uy, A1=A1, A2=A2, B1=B1, B2=B2,
                 S=S, crop=crop)
    return value, cache


def _ssim_backward(cache) -> np.ndarray:
    """d(mean SSIM)/dx for the forward pass captured in ``cache``."""
    filt = cache["filt"]
    x, y = cache["x"], cache["y"]
    ux, uy = cache["ux"], cache["uy"]
    A1, A2, B1, B2, S = cache["A1"], cache["A2"], cache["B1"], cache["B2"], cache["S"]
    crop = cache["crop"]

    gS = np.zeros_like(S)
    count = (crop[0].stop - crop[0].start) * (crop[1].stop - crop[1].start)
    gS[crop] = 1.0 / count

    g_ux = gS * (2 * uy * B1 - 2 * ux * A1) / B1**2 * (A2 / B2)
    g_sxx = gS * (-S / B2)
    g_sxy = gS * (A1 / B1) * (2.0 / B2)
    # moment chains: sxx = G(x^2) - ux^2, sxy = G(xy) - ux uy
    g_ux = g_ux - 2 * ux * g_sxx - uy * g_sxy
    gx = filt.adjoint(g_ux)
    gx += filt.adjoint(g_sxx) * (2 * x)
    gx += filt.adjoint(g_sxy) * y
    return gx


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on luminance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolationError(f"image shapes differ: {a.shape} vs {b.shape}")
    x, y = luminance(a), luminance(b)
    if min(x.shape) < 2 * SSIM_RADIUS + 1:
        raise DomainError(
            f"image {x.shape} smaller than the {2 * SSIM_RADIUS + 1}x"
            f"{2 * SSIM_RADIUS + 1} SSIM window"
        )
    value, _ = _ssim_forward(x, y, SSIM_RADIUS)
    return value


def ssim_and_grad(x: np.ndarray, y: np.ndarray, radius: int):
    """SSIM value and d(value)/dx on single-channel images (loss helper)."""
    value, cache = _ssim_forward(x, y, radius)
    return value, _ssim_backward(cache)
