"""Dataset, checkpoint, mesh, and float-map serialization.

Formats:

* Scene manifest: line-oriented text, one ``view ... end`` block per
  camera with full-precision decimal floats (bit-exact round trip).
* Images: 8-bit PNG.
* Float maps (depth/distance/normal/alpha): PFM, 32-bit little-endian,
  bottom-up rows per the standard header.
* Meshes: PLY, ASCII or binary little-endian.
* Scene checkpoints: little-endian binary, 14 float64 per Gaussian
  {position 3, quaternion 4, scales 3, opacity 1, color 3} after a header
  with magic, version, count, and background color.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SceneLoadError
from .geometry import Camera, CameraIntrinsics, CameraPose, ORTHONORMALITY_TOL
from .scene import GaussianScene
from .surface import TriangleMesh

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "flatsplat-scene 1"
CHECKPOINT_MAGIC = b"FGSC"
CHECKPOINT_VERSION = 1
LOAD_ROTATION_TOL = 1e-6


@dataclass
class SceneDataset:
    """Cameras with their ground-truth images, parallel lists."""

    cameras: list
    images: list
    names: list

    def __post_init__(self):
        if not (len(self.cameras) == len(self.images) == len(self.names)):
            raise SceneLoadError("cameras/images/names must be parallel")
        if len(self.cameras) == 0:
            raise SceneLoadError("dataset is empty")
        for cam, img, name in zip(self.cameras, self.images, self.names):
            if img.shape[:2] != (cam.intrinsics.height, cam.intrinsics.width):
                raise SceneLoadError(
                    f"image {name!r} is {img.shape[:2]}, camera expects "
                    f"{(cam.intrinsics.height, cam.intrinsics.width)}"
                )

    def __len__(self) -> int:
        return len(self.cameras)


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def save_image_png(path, image: np.ndarray):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_dataset(dataset: SceneDataset, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_MAGIC]
    for cam, img, name in zip(dataset.cameras, dataset.images, dataset.names):
        rel = f"images/{name}.png"
        save_image_png(out / rel, img)
        intr = cam.intrinsics
        lines += [
            f"view {name}",
            f"image {rel}",
            "intrinsics "
            + _fmt([intr.fx, intr.fy, intr.cx, intr.cy])
            + f" {intr.width} {intr.height}",
            "rotation " + _fmt(cam.pose.rotation),
            "translation " + _fmt(cam.pose.translation),
            "end",
        ]
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def _orthonormalize_if_needed(R: np.ndarray, where: str) -> np.ndarray:
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > LOAD_ROTATION_TOL or np.linalg.det(R) < 0:
        raise SceneLoadError(f"rotation of {where} is not orthonormal "
                             f"(|R^T R - I| = {err:.2e}, det = {np.linalg.det(R):.3f})")
    if err >= ORTHONORMALITY_TOL:
        # close enough to accept; project to the nearest rotation
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
    return R


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    manifest = root / MANIFEST_NAME if root.is_dir() else root
    root = manifest.parent
    if not manifest.exists():
        raise SceneLoadError(f"manifest not found: {manifest}")
    lines = [ln.strip() for ln in manifest.read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise SceneLoadError(f"{manifest}: missing '{MANIFEST_MAGIC}' header")

    cameras, images, names = [], [], []
    i = 1
    while i < len(lines):
        if not lines[i].startswith("view "):
            raise SceneLoadError(f"{manifest}: expected 'view', got {lines[i]!r}")
        name = lines[i].split(maxsplit=1)[1]
        fields = {}
        i += 1
        while i < len(lines) and lines[i] != "end":
            key, _, rest = lines[i].partition(" ")
            fields[key] = rest
            i += 1
        if i >= len(lines):
            raise SceneLoadError(f"{manifest}: unterminated view block {name!r}")
        i += 1
        try:
            vals = fields["intrinsics"].split()
            intr = CameraIntrinsics(
                fx=float(vals[0]), fy=float(vals[1]), cx=float(vals[2]),
                cy=float(vals[3]), width=int(vals[4]), height=int(vals[5]),
            )
            R = np.array([float(v) for v in fields["rotation"].split()]).reshape(3, 3)
            t = np.array([float(v) for v in fields["translation"].split()])
            rel = fields["image"]
        except (KeyError, ValueError, IndexError) as exc:
            raise SceneLoadError(f"{manifest}: malformed view {name!r}: {exc}") from exc
        R = _orthonormalize_if_needed(R, f"view {name!r}")
        img_path = root / rel
        if not img_path.exists():
            raise SceneLoadError(f"missing image file: {img_path}")
        img = load_image_png(img_path)
        if img.shape[:2] != (intr.height, intr.width):
            raise SceneLoadError(
                f"image {img_path} is {img.shape[:2]}, manifest says "
                f"{(intr.height, intr.width)}"
            )
        cameras.append(Camera(intr, CameraPose(R, t)))
        images.append(img)
        names.append(name)
    return SceneDataset(cameras=cameras, images=images, names=names)


# --- PFM ------------------------------------------------------------------

def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise SceneLoadError(f"PFM supports (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # little-endian
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise SceneLoadError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        raw = f.read(count * 4)
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return data.reshape(shape)[::-1].copy()


# --- PLY ------------------------------------------------------------------

def write_ply(path, mesh: TriangleMesh, binary: bool = True,
              colors: np.ndarray | None = None):
    nv, nt = len(mesh.vertices), len(mesh.triangles)
    fmt = "binary_little_endian 1.0" if binary else "ascii 1.0"
    header = [f"ply", f"format {fmt}", f"element vertex {nv}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += [f"element face {nt}", "property list uchar int vertex_indices",
               "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        if binary:
            if colors is None:
                f.write(mesh.vertices.astype("<f4").tobytes())
            else:
                c8 = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
                for v, c in zip(mesh.vertices.astype("<f4"), c8):
                    f.write(v.tobytes() + c.tobytes())
            tri = mesh.triangles.astype("<i4")
            counts = np.full((nt, 1), 3, dtype=np.uint8)
            for c, t in zip(counts, tri):
                f.write(c.tobytes() + t.tobytes())
        else:
            for i, v in enumerate(mesh.vertices):
                line = f"{v[0]!r} {v[1]!r} {v[2]!r}"
                if colors is not None:
                    c8 = np.round(np.clip(colors[i], 0, 1) * 255).astype(int)
                    line += f" {c8[0]} {c8[1]} {c8[2]}"
                f.write((line + "\n").encode())
            for t in mesh.triangles:
                f.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode())


def read_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise SceneLoadError(f"{path}: not a PLY file")
        fmt = None
        nv = nt = 0
        vertex_props = []
        element = None
        while True:
            line = f.readline()
            if not line:
                raise SceneLoadError(f"{path}: truncated header")
            tok = line.decode("ascii", "replace").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                element = tok[1]
                if element == "vertex":
                    nv = int(tok[2])
                elif element == "face":
                    nt = int(tok[2])
            elif tok[0] == "property" and element == "vertex":
                vertex_props.append((tok[-1], tok[1]))
            elif tok[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise SceneLoadError(f"{path}: unsupported PLY format {fmt}")
        sizes = {"float": 4, "float32": 4, "double": 8, "float64": 8,
                 "uchar": 1, "uint8": 1, "char": 1, "int8": 1,
                 "short": 2, "ushort": 2, "int": 4, "int32": 4, "uint": 4}
        verts = np.empty((nv, 3))
        if fmt == "ascii":
            order = [name for name, _ in vertex_props]
            for i in range(nv):
                vals = f.readline().split()
                rec = dict(zip(order, vals))
                verts[i] = [float(rec["x"]), float(rec["y"]), float(rec["z"])]
            tris = []
            for _ in range(nt):
                vals = [int(v) for v in f.readline().split()]
                if vals[0] != 3:
                    raise SceneLoadError(f"{path}: only triangle faces supported")
                tris.append(vals[1:4])
            tris = np.asarray(tris, dtype=np.int64).reshape(nt, 3)
        else:
            np_types = {"float": "<f4", "float32": "<f4", "double": "<f8",
                        "float64": "<f8", "uchar": "u1", "uint8": "u1",
                        "char": "i1", "int8": "i1", "short": "<i2",
                        "ushort": "<u2", "int": "<i4", "int32": "<i4",
                        "uint": "<u4"}
            rec_dtype = np.dtype([(name, np_types[typ]) for name, typ in vertex_props])
            raw = f.read(rec_dtype.itemsize * nv)
            rec = np.frombuffer(raw, dtype=rec_dtype)
            verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            tris = np.empty((nt, 3), dtype=np.int64)
            for i in range(nt):
                (count,) = struct.unpack("<B", f.read(1))
                if count != 3:
                    raise SceneLoadError(f"{path}: only triangle faces supported")
                tris[i] = struct.unpack("<3i", f.read(12))
        return TriangleMesh(verts, tris)


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path, scene: GaussianScene):
    n = len(scene)
    rec = np.concatenate(
        [scene.positions, scene.quaternions, scene.scales,
         scene.opacities[:, None], scene.colors], axis=1
    )
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, n))
        f.write(scene.background.astype("<f8").tobytes())
        f.write(rec.astype("<f8").tobytes())


def load_checkpoint(path) -> GaussianScene:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise SceneLoadError(f"{path}: bad checkpoint magic {magic!r}")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise SceneLoadError(f"{path}: unsupported checkpoint version {version}")
        background = np.frombuffer(f.read(24), dtype="<f8").copy()
        rec = np.frombuffer(f.read(n * 14 * 8), dtype="<f8").reshape(n, 14).copy()
    scene = GaussianScene(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10],
                          rec[:, 11:14], background)
    scene.validate()
    return scene


# --- misc artifacts -------------------------------------------------------

def write_loss_csv(path, history):
    cols = ["iteration", "photometric", "svgeo", "mvrgb", "dist", "nor", "total"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in history:
            f.write(",".join(
                str(row["iteration"]) if c == "iteration" else repr(float(row[c]))
                for c in cols
            ) + "\n")


def save_points_txt(path, points: np.ndarray, colors: np.ndarray):
    with open(path, "w") as f:
        for p, c in zip(points, colors):
            f.write(_fmt(p) + " " + _fmt(c) + "\n")


def load_points_txt(path):
    data = np.loadtxt(path, dtype=np.float64).reshape(-1, 6)
    return data[:, :3], data[:, 3:]


def save_shape_json(path, spec):
    info = {
        "shape": spec.shape, "extent": spec.extent, "radius": spec.radius,
        "half_extents": list(spec.half_extents), "texture": spec.texture,
        "cell": spec.cell, "softness": spec.softness,
        "color0": list(spec.color0), "color1": list(spec.color1),
        "constant_rgb": list(spec.constant_rgb), "rig": spec.rig,
        "views": spec.views, "rig_radius": spec.rig_radius,
        "rig_height": spec.rig_height, "arc_span_deg": spec.arc_span_deg,
        "image_size": spec.image_size, "fov_deg": spec.fov_deg,
        "background": list(spec.background), "seed": spec.seed,
    }
    Path(path).write_text(json.dumps(info, indent=2) + "\n")


def load_shape_json(path):
    from .synthetic import SyntheticSpec

    info = json.loads(Path(path).read_text())
    info["half_extents"] = tuple(info["half_extents"])
    for key in ("color0", "color1", "constant_rgb", "background"):
        info[key] = tuple(info[key])
    return SyntheticSpec(**info)
