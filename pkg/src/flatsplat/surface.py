"""Mesh extraction: TSDF fusion of depth maps and marching cubes.

The marching-cubes case table is generated at import time by pairing cut
edges on each cube face (ambiguous faces always separate the two
inside-diagonal corners).  The pairing rule depends only on face data, so
neighboring cubes agree and the extracted surface is crack-free; vertices
are linear-interpolation zero crossings computed in float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import parallel
from .errors import DomainError
from .geometry import Camera, ray_grid
from .renderer import render
from .scene import GaussianScene

_CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
     (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)], dtype=np.int64
)
_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
          (0, 4), (1, 5), (2, 6), (3, 7)]
_FACES = [(0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (3, 2, 6, 7),
          (0, 3, 7, 4), (1, 2, 6, 5)]

# Edge -> (origin corner offset, axis); endpoints are origin and origin+axis.
_EDGE_ORIGIN = np.zeros((12, 3), dtype=np.int64)
_EDGE_AXIS = np.zeros(12, dtype=np.int64)
for _e, (_a, _b) in enumerate(_EDGES):
    lo = np.minimum(_CORNERS[_a], _CORNERS[_b])
    _EDGE_ORIGIN[_e] = lo
    _EDGE_AXIS[_e] = int(np.nonzero(_CORNERS[_a] != _CORNERS[_b])[0][0])


def _build_tri_table():
    """256-case triangle table: per case, a flat list of edge ids (3 per tri)."""
    edge_of = {frozenset(e): i for i, e in enumerate(_EDGES)}
    table = []
    for case in range(256):
        inside = [(case >> i) & 1 for i in range(8)]
        cut = {
            e for e, (a, b) in enumerate(_EDGES) if inside[a] != inside[b]
        }
        adj = {e: [] for e in cut}
        for face in _FACES:
            ce = []
            for i in range(4):
                a, b = face[i], face[(i + 1) % 4]
                e = edge_of[frozenset((a, b))]
                if e in cut:
                    ce.append((e, a, b))
            if len(ce) == 2:
                adj[ce[0][0]].append(ce[1][0])
                adj[ce[1][0]].append(ce[0][0])
            elif len(ce) == 4:
                # Alternating in/out corners: connect the two cut edges
                # touching each inside corner (separates the diagonal).
                for corner in face:
                    if inside[corner]:
                        touch = [e for e, a, b in ce if corner in (a, b)]
                        adj[touch[0]].append(touch[1])
                        adj[touch[1]].append(touch[0])
        tris = []
        visited = set()
        for start in adj:
            if start in visited:
                continue
            cycle = [start]
            visited.add(start)
            prev, cur = None, start
            while True:
                nxt = [e for e in adj[cur] if e != prev]
                nxt = nxt[0] if nxt else adj[cur][0]
                if nxt == start:
                    break
                cycle.append(nxt)
                visited.add(nxt)
                prev, cur = cur, nxt
            for i in range(1, len(cycle) - 1):
                tris.extend((cycle[0], cycle[i], cycle[i + 1]))
        table.append(tris)
    width = max(len(t) for t in table)
    out = np.full((256, width), -1, dtype=np.int64)
    for i, t in enumerate(table):
        out[i, : len(t)] = t
    return out


_TRI_TABLE = _build_tri_table()


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) world coordinates
    triangles: np.ndarray  # (T, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise DomainError("triangle indices out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class TsdfVolume:
    """Truncated signed distance grid with per-voxel observation weights."""

    origin: np.ndarray      # world position of the grid's min corner
    voxel_size: float
    dims: tuple
    tsdf: np.ndarray
    weight: np.ndarray
    truncation: float

    @classmethod
    def create(cls, origin, voxel_size: float, dims, truncation: float | None = None):
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise DomainError("volume dims must be positive")
        truncation = 4.0 * voxel_size if truncation is None else float(truncation)
        if truncation < voxel_size:
            raise DomainError("truncation must be at least one voxel")
        return cls(
            origin=np.asarray(origin, dtype=np.float64).reshape(3),
            voxel_size=float(voxel_size),
            dims=dims,
            tsdf=np.ones(dims),
            weight=np.zeros(dims),
            truncation=truncation,
        )


def tsdf_integrate(vol: TsdfVolume, depth: np.ndarray, cam: Camera,
                   valid: np.ndarray | None = None) -> TsdfVolume:
    """Fuse one depth map into the volume (weighted running average).

    Pixels where ``valid`` is false (default: non-positive depth) are
    skipped.  Returns the updated volume (mutated in place).
    """
    intr = cam.intrinsics
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise DomainError("depth map does not match camera size")
    ok = depth > 0 if valid is None else (np.asarray(valid, bool) & (depth > 0))

    nx, ny, nz = vol.dims
    R, t = cam.pose.rotation, cam.pose.translation
    for x0 in range(0, nx, 16):
        x1 = min(x0 + 16, nx)
        xs = np.arange(x0, x1)
        idx = np.stack(np.meshgrid(xs, np.arange(ny), np.arange(nz),
                                   indexing="ij"), axis=-1).reshape(-1, 3)
        centers = vol.origin + (idx + 0.5) * vol.voxel_size
        pc = centers @ R.T + t
        z = pc[:, 2]
        front = z > 1e-9
        u = np.full(len(pc), -1.0)
        v = np.full(len(pc), -1.0)
        u[front] = intr.fx * pc[front, 0] / z[front] + intr.cx
        v[front] = intr.fy * pc[front, 1] / z[front] + intr.cy
        iu = np.floor(u).astype(np.int64)
        iv = np.floor(v).astype(np.int64)
        inb = front & (iu >= 0) & (iu < intr.width) & (iv >= 0) & (iv < intr.height)
        iu, iv = np.clip(iu, 0, intr.width - 1), np.clip(iv, 0, intr.height - 1)
        usable = inb & ok[iv, iu]
        sdf = depth[iv, iu] - z
        usable &= sdf > -vol.truncation
        if not np.any(usable):
            continue
        sub = idx[usable]
        val = np.clip(sdf[usable] / vol.truncation, -1.0, 1.0)
        sl = (sub[:, 0], sub[:, 1], sub[:, 2])
        w_old = vol.weight[sl]
        vol.tsdf[sl] = (vol.tsdf[sl] * w_old + val) / (w_old + 1.0)
        vol.weight[sl] = w_old + 1.0
    return vol


def marching_cubes(values: np.ndarray, level: float = 0.0,
                   mask: np.ndarray | None = None):
    """Zero-crossing triangulation of a scalar grid (float64 throughout).

    Returns (vertices in grid-index coordinates, triangle index array).
    Cubes with any corner outside ``mask`` are skipped.
    """
    values = np.asarray(values, dtype=np.float64)
    nx, ny, nz = values.shape
    if min(nx, ny, nz) < 2:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    inside = values < level

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    ok = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        corner = inside[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
        case |= corner.astype(np.int64) << bit
        if mask is not None:
            ok &= mask[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]

    active = ok & (case != 0) & (case != 255)
    cubes = np.argwhere(active)
    if len(cubes) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    rows = _TRI_TABLE[case[active]]
    entry_ok = rows >= 0
    cube_rep = np.repeat(np.arange(len(cubes)), entry_ok.sum(axis=1))
    edges = rows[entry_ok]

    # Global edge key: (origin voxel, axis).
    origin_voxel = cubes[cube_rep] + _EDGE_ORIGIN[edges]
    axis = _EDGE_AXIS[edges]
    key = ((origin_voxel[:, 0] * ny + origin_voxel[:, 1]) * nz
           + origin_voxel[:, 2]) * 3 + axis
    uniq, inverse = np.unique(key, return_inverse=True)
    triangles = inverse.reshape(-1, 3)

    uv = np.empty((len(uniq), 3), dtype=np.int64)
    rem, uv[:, 2] = np.divmod(uniq // 3, nz)
    uv[:, 0], uv[:, 1] = np.divmod(rem, ny)
    uaxis = uniq % 3
    p0 = uv
    p1 = uv.copy()
    p1[np.arange(len(uniq)), uaxis] += 1
    v0 = values[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = values[p1[:, 0], p1[:, 1], p1[:, 2]]
    tfrac = (level - v0) / (v1 - v0)
    verts = p0.astype(np.float64)
    verts[np.arange(len(uniq)), uaxis] += tfrac

    # Drop degenerate (zero-area) triangles, then compact vertices.
    a = verts[triangles[:, 0]]
    b = verts[triangles[:, 1]]
    c = verts[triangles[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    triangles = triangles[area2 > 0]
    used = np.unique(triangles)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[triangles]


def extract_mesh(vol: TsdfVolume, min_weight: float = 1.0) -> TriangleMesh:
    """Marching cubes on the TSDF zero level set, skipping unobserved cubes."""
    mask = vol.weight >= min_weight
    verts, tris = marching_cubes(vol.tsdf, 0.0, mask)
    world = vol.origin + (verts + 0.5) * vol.voxel_size
    return TriangleMesh(world, tris)


def fuse_scene(scene: GaussianScene, cameras, voxel_resolution: int = 128,
               voxel_size: float | None = None, truncation: float | None = None,
               min_weight: float = 1.0, alpha_threshold: float = 0.5) -> TriangleMesh:
    """Render depth for every camera, fuse into a TSDF, extract the mesh.

    The volume bounding box is fitted to the union of back-projected valid
    depths, padded by 5 percent; the default voxel size is extent /
    ``voxel_resolution``.
    """
    if len(cameras) < 1:
        raise DomainError("fuse_scene needs at least one camera")
    depths = []
    valids = []
    points = []
    for cam in cameras:
        buf = render(scene, cam)
        use = buf.depth_valid & (buf.alpha > alpha_threshold) & (buf.depth > 0)
        depths.append(buf.depth)
        valids.append(use)
        if np.any(use):
            rays = ray_grid(cam.intrinsics)
            pc = buf.depth[use, None] * rays[use]
            points.append(cam.pose.to_world(pc))
    if not points:
        warnings.warn("fuse_scene: no valid depths in any view; empty mesh")
        return TriangleMesh.empty()

    pts = np.concatenate(points, axis=0)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        warnings.warn("fuse_scene: degenerate depth extent; empty mesh")
        return TriangleMesh.empty()
    pad = 0.05 * extent
    lo, hi = lo - pad, hi + pad
    vs = extent / voxel_resolution if voxel_size is None else float(voxel_size)
    dims = np.maximum(np.ceil((hi - lo) / vs).astype(int) + 1, 2)
    vol = TsdfVolume.create(lo, vs, dims, truncation)
    for cam, depth, use in zip(cameras, depths, valids):
        tsdf_integrate(vol, depth, cam, valid=use)
    return extract_mesh(vol, min_weight=min_weight)
