"""Synthetic scene fixtures: analytic shapes, textures, camera rigs.

Ground-truth images and depth maps come from direct ray-shape
intersection, never from the splat renderer, so fixtures stay independent
oracles for everything the renderer and losses produce.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DomainError
from .geometry import Camera, CameraIntrinsics, look_at_pose, ray_grid
from .io import SceneDataset
from .rng import make_rng
from .scene import GaussianScene

RAY_EPS = 1e-9


@dataclass
class SyntheticSpec:
    """Parameters of a generated fixture dataset."""

    shape: str = "plane"              # plane | sphere | box
    extent: float = 2.0               # plane side length
    radius: float = 1.0               # sphere radius
    half_extents: tuple = (0.8, 0.8, 0.6)
    texture: str = "checker"          # checker | noise | constant
    cell: float = 0.6
    softness: float = 0.35            # checker edge softness (0 -> hard)
    color0: tuple = (0.15, 0.25, 0.55)
    color1: tuple = (0.85, 0.75, 0.35)
    constant_rgb: tuple = (0.6, 0.5, 0.4)
    rig: str = "ring"                 # ring | arc
    views: int = 4
    rig_radius: float = 2.6
    rig_height: float = 2.4
    arc_span_deg: float = 100.0
    image_size: int = 64
    fov_deg: float = 50.0
    background: tuple = (0.05, 0.05, 0.08)
    seed: int = 0

    def __post_init__(self):
        if self.views < 2:
            raise ConfigurationError("need at least 2 views")
        if self.image_size < 16:
            raise ConfigurationError("image size must be at least 16")
        if self.shape not in ("plane", "sphere", "box"):
            raise ConfigurationError(f"unknown shape {self.shape!r}")
        if self.texture not in ("checker", "noise", "constant"):
            raise ConfigurationError(f"unknown texture {self.texture!r}")
        if self.rig not in ("ring", "arc"):
            raise ConfigurationError(f"unknown rig {self.rig!r}")


@dataclass
class GroundTruth:
    """Analytic surface description plus per-view analytic depth maps."""

    spec: SyntheticSpec
    depths: list = field(repr=False)  # z-depth maps, 0 where no hit

    def surface_points(self, n: int, seed: int = 0) -> np.ndarray:
        rng = make_rng(seed, "gt_surface", self.spec.seed)
        s = self.spec
        if s.shape == "plane":
            xy = rng.uniform(-s.extent / 2, s.extent / 2, (n, 2))
            return np.concatenate([xy, np.zeros((n, 1))], axis=1)
        if s.shape == "sphere":
            v = rng.normal(0, 1, (n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return s.radius * v
        hx, hy, hz = s.half_extents
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1, 1, (n, 2))
        pts = np.empty((n, 3))
        for f in range(6):
            m = face == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            he = (hx, hy, hz)
            pts[m, axis] = sign * he[axis]
            pts[m, others[0]] = uv[m, 0] * he[others[0]]
            pts[m, others[1]] = uv[m, 1] * he[others[1]]
        return pts

    def distance_to_surface(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the analytic surface."""
        s = self.spec
        p = np.asarray(points, dtype=np.float64)
        if s.shape == "sphere":
            return np.abs(np.linalg.norm(p, axis=1) - s.radius)
        if s.shape == "plane":
            in_xy = np.maximum(np.abs(p[:, :2]) - s.extent / 2, 0.0)
            return np.sqrt(p[:, 2] ** 2 + (in_xy**2).sum(axis=1))
        q = np.abs(p) - np.asarray(s.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


def _texture_uv(spec: SyntheticSpec, pts: np.ndarray) -> np.ndarray:
    if spec.shape == "plane":
        return pts[:, :2]
    if spec.shape == "sphere":
        r = np.linalg.norm(pts, axis=1)
        az = np.arctan2(pts[:, 1], pts[:, 0])
        pol = np.arccos(np.clip(pts[:, 2] / np.where(r > 0, r, 1.0), -1, 1))
        return np.stack([az, pol], axis=1) * spec.radius
    # box: planar coordinates of the dominant face
    he = np.asarray(spec.half_extents)
    axis = np.argmax(np.abs(pts) / he, axis=1)
    uv = np.empty((len(pts), 2))
    for a in range(3):
        m = axis == a
        others = [o for o in range(3) if o != a]
        uv[m, 0] = pts[m, others[0]]
        uv[m, 1] = pts[m, others[1]]
    return uv


def texture_color(spec: SyntheticSpec, pts: np.ndarray) -> np.ndarray:
    """Analytic surface color at world points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    c0 = np.asarray(spec.color0)
    c1 = np.asarray(spec.color1)
    if spec.texture == "constant":
        return np.tile(np.asarray(spec.constant_rgb), (len(pts), 1))
    uv = _texture_uv(spec, pts)
    if spec.texture == "checker":
        s = np.sin(np.pi * uv[:, 0] / spec.cell) * np.sin(np.pi * uv[:, 1] / spec.cell)
        t = 0.5 + 0.5 * (np.tanh(s / spec.softness) if spec.softness > 0 else np.sign(s))
    else:  # smooth band-limited noise
        rng = make_rng(spec.seed, "texture")
        freqs = rng.uniform(0.3, 1.6, (6, 2)) / spec.cell
        phases = rng.uniform(0, 2 * np.pi, 6)
        amps = rng.uniform(0.5, 1.0, 6)
        amps /= amps.sum()
        s = np.zeros(len(pts))
        for f, ph, a in zip(freqs, phases, amps):
            s += a * np.cos(2 * np.pi * (uv @ f) + ph)
        t = 0.5 + 0.35 * s
    return c0 + (c1 - c0) * np.clip(t, 0.0, 1.0)[:, None]


def _intersect(spec: SyntheticSpec, origin: np.ndarray, dirs: np.ndarray):
    """Smallest positive ray parameter per ray (0 where no hit).

    ``dirs`` are unnormalized world directions with unit camera-space z, so
    the parameter is the z-depth directly.
    """
    flat = dirs.reshape(-1, 3)
    t = np.zeros(len(flat))
    if spec.shape == "plane":
        dz = flat[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = np.where(np.abs(dz) > 1e-15, -origin[2] / dz, -1.0)
        hit = tt > RAY_EPS
        p = origin + tt[:, None] * flat
        hit &= (np.abs(p[:, 0]) <= spec.extent / 2) & (np.abs(p[:, 1]) <= spec.extent / 2)
        t = np.where(hit, tt, 0.0)
    elif spec.shape == "sphere":
        a = np.einsum("mi,mi->m", flat, flat)
        b = 2.0 * flat @ origin
        c = origin @ origin - spec.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        tt = np.where(t0 > RAY_EPS, t0, t1)
        t = np.where(hit & (tt > RAY_EPS), tt, 0.0)
    else:
        he = np.asarray(spec.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / flat
        lo = (-he - origin) * inv
        hi = (he - origin) * inv
        tmin = np.nanmax(np.minimum(lo, hi), axis=1)
        tmax = np.nanmin(np.maximum(lo, hi), axis=1)
        hit = (tmax >= tmin) & (tmax > RAY_EPS)
        tt = np.where(tmin > RAY_EPS, tmin, tmax)
        t = np.where(hit & (tt > RAY_EPS), tt, 0.0)
    return t.reshape(dirs.shape[:-1])


def make_rig(spec: SyntheticSpec):
    """Cameras of the fixture rig, all looking at the origin."""
    w = h = int(spec.image_size)
    f = (w / 2.0) / np.tan(np.radians(spec.fov_deg) / 2.0)
    intr = CameraIntrinsics(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)
    if spec.rig == "ring":
        angles = np.linspace(0, 2 * np.pi, spec.views, endpoint=False)
    else:
        span = np.radians(spec.arc_span_deg)
        angles = np.linspace(-span / 2, span / 2, spec.views)
    cams = []
    for ang in angles:
        pos = np.array([
            spec.rig_radius * np.cos(ang),
            spec.rig_radius * np.sin(ang),
            spec.rig_height,
        ])
        cams.append(Camera(intr, look_at_pose(pos, (0.0, 0.0, 0.0))))
    positions = np.stack([c.pose.center for c in cams])
    if np.ptp(positions, axis=0).max() < 1e-9:
        raise DomainError("degenerate rig: all cameras coincide")
    return cams


def render_analytic(spec: SyntheticSpec, cam: Camera):
    """Ray-trace one view of the analytic shape: (image, z-depth map)."""
    rays = ray_grid(cam.intrinsics)
    dirs = rays @ cam.pose.rotation  # camera rays in world frame
    origin = cam.pose.center
    depth = _intersect(spec, origin, dirs)
    hit = depth > 0
    img = np.tile(np.asarray(spec.background, dtype=np.float64),
                  (*depth.shape, 1))
    if np.any(hit):
        pts = origin + depth[hit, None] * dirs[hit]
        img[hit] = texture_color(spec, pts)
    return img, depth


def generate_synthetic(spec: SyntheticSpec):
    """Ray-traced fixture dataset plus its analytic ground truth."""
    cams = make_rig(spec)
    images = []
    depths = []
    names = [f"view{idx:03d}" for idx in range(len(cams))]
    for cam in cams:
        img, depth = render_analytic(spec, cam)
        images.append(img)
        depths.append(depth)
    dataset = SceneDataset(cameras=cams, images=images, names=names)
    return dataset, GroundTruth(spec=spec, depths=depths)


def initial_point_cloud(gt: GroundTruth, n_points: int, position_noise: float,
                        seed: int = 0):
    """Noisy colored surface samples, standing in for an SfM point cloud."""
    rng = make_rng(seed, "init_cloud", gt.spec.seed)
    pts = gt.surface_points(n_points, seed=seed)
    colors = texture_color(gt.spec, pts)
    pts = pts + rng.normal(0, position_noise, pts.shape)
    return pts, colors


def _normals_from_pca(pts: np.ndarray, k: int = 8) -> np.ndarray:
    tree = cKDTree(pts)
    _, nb = tree.query(pts, k=min(k + 1, len(pts)))
    normals = np.empty_like(pts)
    for i in range(len(pts)):
        q = pts[nb[i]] - pts[nb[i]].mean(axis=0)
        _, _, vt = np.linalg.svd(q, full_matrices=False)
        normals[i] = vt[-1]
    return normals


def _quat_from_normal(normals: np.ndarray) -> np.ndarray:
    """Unit quaternions rotating +z onto each normal."""
    e3 = np.array([0.0, 0.0, 1.0])
    quats = np.empty((len(normals), 4))
    for i, n in enumerate(normals):
        n = n / np.linalg.norm(n)
        axis = np.cross(e3, n)
        s = np.linalg.norm(axis)
        c = float(e3 @ n)
        if s < 1e-12:
            quats[i] = (1.0, 0.0, 0.0, 0.0) if c > 0 else (0.0, 1.0, 0.0, 0.0)
            continue
        ang = np.arctan2(s, c)
        quats[i, 0] = np.cos(ang / 2)
        quats[i, 1:] = np.sin(ang / 2) * axis / s
    return quats


def scene_from_points(points: np.ndarray, colors: np.ndarray,
                      background, opacity: float = 0.1) -> GaussianScene:
    """Flat-Gaussian initialization from a colored point cloud.

    Normals come from a local PCA plane fit (k=8); in-plane scales are set
    from the mean neighbor spacing.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return GaussianScene.empty(background)
    quats = _quat_from_normal(_normals_from_pca(points))
    if n > 1:
        d, _ = cKDTree(points).query(points, k=min(4, n))
        spacing = d[:, 1:].mean(axis=1)
    else:
        spacing = np.full(1, 0.1)
    s01 = np.clip(spacing, 1e-3, None)
    scales = np.stack([s01, s01, 0.005 * s01], axis=1)
    return GaussianScene(points, quats, scales, np.full(n, opacity),
                         np.clip(colors, 0, 1), background)
