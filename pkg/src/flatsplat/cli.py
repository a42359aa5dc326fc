"""Command-line interface: synth, train, render, fuse, eval, check-grad."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .errors import FlatsplatError
from .gradcheck import run_gradient_suite
from .metrics import PointCloud, chamfer_distance, psnr, sample_mesh, ssim
from .regularizers import MaskReason, ViewPair, mdrr_loss, mne_loss
from .renderer import render
from .rng import make_rng
from .surface import fuse_scene
from .synthetic import (
    SyntheticSpec,
    generate_synthetic,
    initial_point_cloud,
    scene_from_points,
)
from .trainer import LossWeights, TrainConfig, train

MASK_PALETTE = {
    int(MaskReason.VALID): (40, 180, 90),
    int(MaskReason.OUT_OF_BOUNDS): (120, 120, 120),
    int(MaskReason.INVALID_DEPTH): (20, 20, 20),
    int(MaskReason.GRAZING_NORMAL): (70, 110, 220),
    int(MaskReason.RESIDUAL_EXCEEDED): (240, 160, 40),
    int(MaskReason.OCCLUDED): (210, 50, 50),
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flatsplat",
        description="Flat-Gaussian splatting: synthetic fixtures, training, "
                    "meshing, and evaluation.",
    )
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="generate a synthetic fixture dataset")
    s.add_argument("--shape", choices=["plane", "sphere", "box"], default="plane")
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--texture", choices=["checker", "noise", "constant"],
                   default="checker")
    s.add_argument("--cell", type=float, default=0.6)
    s.add_argument("--softness", type=float, default=0.35)
    s.add_argument("--extent", type=float, default=2.0)
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--rig", choices=["ring", "arc"], default="ring")
    s.add_argument("--rig-radius", type=float, default=2.6)
    s.add_argument("--rig-height", type=float, default=2.4)
    s.add_argument("--fov", type=float, default=50.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init-points", type=int, default=400)
    s.add_argument("--init-noise", type=float, default=0.02)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="optimize a scene against a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--iters", type=int)
    t.add_argument("--phase-start", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--init-opacity", type=float, default=0.1)
    t.add_argument("--random-init", type=int, default=0,
                   help="ignore init_points.txt; sample N random points")

    r = sub.add_parser("render", help="render buffers for one view")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--mv-diagnostics", type=int, default=None, metavar="NEAR",
                   help="also dump multi-view residual/mask maps against view NEAR")

    f = sub.add_parser("fuse", help="TSDF-fuse depth maps and export a mesh")
    f.add_argument("--data", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--resolution", type=int, default=128)
    f.add_argument("--voxel-size", type=float)
    f.add_argument("--min-weight", type=float, default=1.0)
    f.add_argument("--ascii", action="store_true")

    e = sub.add_parser("eval", help="evaluate PSNR/SSIM and Chamfer distance")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--mesh")
    e.add_argument("--gt-shape")
    e.add_argument("--points", type=int, default=10000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv")

    g = sub.add_parser("check-grad", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--gaussians", type=int, default=10)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--step", type=float, default=1e-4)
    return p


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        shape=args.shape, views=args.views, image_size=args.size,
        texture=args.texture, cell=args.cell, softness=args.softness,
        extent=args.extent, radius=args.radius, rig=args.rig,
        rig_radius=args.rig_radius, rig_height=args.rig_height,
        fov_deg=args.fov, seed=args.seed,
    )
    dataset, gt = generate_synthetic(spec)
    out = Path(args.out)
    fio.save_dataset(dataset, out)
    gt_dir = out / "gt"
    gt_dir.mkdir(exist_ok=True)
    fio.save_shape_json(gt_dir / "shape.json", spec)
    for name, depth in zip(dataset.names, gt.depths):
        fio.write_pfm(gt_dir / f"depth_{name}.pfm", depth)
    pts, cols = initial_point_cloud(gt, args.init_points, args.init_noise,
                                    seed=args.seed)
    fio.save_points_txt(out / "init_points.txt", pts, cols)
    print(f"wrote {len(dataset)} views to {out}")
    return 0


def _cmd_train(args) -> int:
    dataset = fio.load_dataset(args.data)
    cfg_data = {}
    if args.config:
        cfg_data = json.loads(Path(args.config).read_text())
    config = TrainConfig.from_dict(cfg_data)
    if args.iters is not None:
        config.total_iters = args.iters
    if args.phase_start is not None:
        config.geometric_phase_start = args.phase_start
    if args.seed is not None:
        config.seed = args.seed

    init_file = Path(args.data) / "init_points.txt"
    bg = np.asarray((0.05, 0.05, 0.08))
    shape_file = Path(args.data) / "gt" / "shape.json"
    if shape_file.exists():
        bg = np.asarray(fio.load_shape_json(shape_file).background)
    if args.random_init > 0:
        rng = make_rng(config.seed, "random_init")
        pts = rng.uniform(-1, 1, (args.random_init, 3))
        cols = rng.uniform(0.2, 0.8, (args.random_init, 3))
    elif init_file.exists():
        pts, cols = fio.load_points_txt(init_file)
    else:
        print(f"error: {init_file} not found (use --random-init N)",
              file=sys.stderr)
        return 1
    scene = scene_from_points(pts, cols, bg, opacity=args.init_opacity)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def hook(state, row):
        it = row["iteration"]
        if args.checkpoint_every and (it + 1) % args.checkpoint_every == 0:
            fio.save_checkpoint(out / f"ckpt_{it + 1:06d}.fgs", state.scene)

    state = train(config, scene, dataset, on_iteration=hook)
    fio.save_checkpoint(out / "scene_final.fgs", state.scene)
    fio.write_loss_csv(out / "loss_history.csv", state.history)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    last = state.history[-1]
    print(f"trained {config.total_iters} iters, {len(state.scene)} gaussians, "
          f"final total loss {last['total']:.6g}")
    return 0


def _cmd_render(args) -> int:
    dataset = fio.load_dataset(args.data)
    scene = fio.load_checkpoint(args.checkpoint)
    if not (0 <= args.view < len(dataset)):
        print(f"error: view {args.view} out of range", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = render(scene, dataset.cameras[args.view])
    name = dataset.names[args.view]
    fio.save_image_png(out / f"{name}_color.png", buf.color)
    fio.write_pfm(out / f"{name}_normal.pfm", buf.normal)
    fio.write_pfm(out / f"{name}_distance.pfm", buf.distance)
    fio.write_pfm(out / f"{name}_depth.pfm", buf.depth)
    fio.write_pfm(out / f"{name}_alpha.pfm", buf.alpha)

    if args.mv_diagnostics is not None:
        ni = args.mv_diagnostics
        if not (0 <= ni < len(dataset)) or ni == args.view:
            print("error: bad --mv-diagnostics view index", file=sys.stderr)
            return 1
        near_buf = render(scene, dataset.cameras[ni])
        pair = ViewPair.create(
            dataset.cameras[args.view], dataset.cameras[ni], buf, near_buf,
            dataset.images[args.view], dataset.images[ni],
        )
        for tag, res in (("dist", mdrr_loss(pair)), ("nor", mne_loss(pair))):
            fio.write_pfm(out / f"{name}_resid_{tag}.pfm", res.residual)
            palette = np.zeros((256, 3), dtype=np.uint8)
            for code, rgb in MASK_PALETTE.items():
                palette[code] = rgb
            fio.save_image_png(out / f"{name}_mask_{tag}.png",
                               palette[res.mask.reasons] / 255.0)
    print(f"wrote render artifacts for view {name} to {out}")
    return 0


def _cmd_fuse(args) -> int:
    dataset = fio.load_dataset(args.data)
    scene = fio.load_checkpoint(args.checkpoint)
    mesh = fuse_scene(scene, dataset.cameras, voxel_resolution=args.resolution,
                      voxel_size=args.voxel_size, min_weight=args.min_weight)
    fio.write_ply(args.out, mesh, binary=not args.ascii)
    print(f"wrote mesh with {len(mesh.vertices)} vertices / "
          f"{len(mesh.triangles)} triangles to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    dataset = fio.load_dataset(args.data)
    rows = []
    if args.checkpoint:
        scene = fio.load_checkpoint(args.checkpoint)
        for cam, img, name in zip(dataset.cameras, dataset.images, dataset.names):
            buf = render(scene, cam)
            rows.append((name, psnr(buf.color, img), ssim(buf.color, img)))
        print(f"{'view':12s} {'PSNR (dB)':>10s} {'SSIM':>8s}")
        for name, p, s in rows:
            print(f"{name:12s} {p:10.3f} {s:8.4f}")
        mean_p = float(np.mean([r[1] for r in rows]))
        mean_s = float(np.mean([r[2] for r in rows]))
        print(f"{'mean':12s} {mean_p:10.3f} {mean_s:8.4f}")

    cd = None
    if args.mesh:
        gt_path = args.gt_shape or str(Path(args.data) / "gt" / "shape.json")
        if not Path(gt_path).exists():
            print(f"error: ground-truth shape file not found: {gt_path}",
                  file=sys.stderr)
            return 1
        from .synthetic import GroundTruth

        spec = fio.load_shape_json(gt_path)
        gt = GroundTruth(spec=spec, depths=[])
        mesh = fio.read_ply(args.mesh)
        if mesh.is_empty():
            print("error: mesh is empty", file=sys.stderr)
            return 1
        mesh_pts = sample_mesh(mesh, args.points, seed=args.seed)
        gt_pts = PointCloud(gt.surface_points(args.points, seed=args.seed + 1))
        cd = chamfer_distance(mesh_pts, gt_pts)
        print(f"chamfer distance: {cd:.6f}")

    if args.csv:
        with open(args.csv, "w") as f:
            f.write("view,psnr,ssim\n")
            for name, p, s in rows:
                f.write(f"{name},{p!r},{s!r}\n")
            if cd is not None:
                f.write(f"chamfer,,{cd!r}\n")
    return 0


def _cmd_check_grad(args) -> int:
    print(f"gradient suite: seed={args.seed} gaussians={args.gaussians} "
          f"size={args.size} step={args.step:g}")
    results = run_gradient_suite(args.seed, args.gaussians, args.size, args.step)
    worst = max(r[0] for r in results.values())
    print(f"max tolerance ratio: {worst:.4f} "
          f"(<= 1.0 passes at 1e-3 rel / 1e-6 abs)")
    return 0 if worst <= 1.0 else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_usage()
        return 2
    handlers = {
        "synth": _cmd_synth, "train": _cmd_train, "render": _cmd_render,
        "fuse": _cmd_fuse, "eval": _cmd_eval, "check-grad": _cmd_check_grad,
    }
    try:
        return handlers[args.command](args)
    except FlatsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
