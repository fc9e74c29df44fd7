"""Command-line entry points: verification, scene generation, training, experiments."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import gradients, harness, losses
from .model import read_scene, write_scene
from .projection import read_cameras, write_cameras
from .rasterizer import RenderOptions, render, save_plane, save_png


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--lambda-f", type=float, dest="lambda_f")
    p.add_argument("--lambda-m", type=float, dest="lambda_m")
    p.add_argument("--mask-mode", choices=harness.TRAIN_MODES, dest="mask_mode")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="main training iterations")
    p.add_argument("--recovery-iters", type=int)
    p.add_argument("--precision", choices=["32", "64"])
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--scene", help="scene file or generator spec 'seed:N:cams:WxH'")
    p.add_argument("--out-dir", required=True)


def _config_from_args(args) -> harness.TrainConfig:
    if args.config:
        cfg = harness.TrainConfig.from_file(args.config)
    else:
        cfg = harness.TrainConfig.desk()
    d = cfg.to_dict()
    if args.lambda_f is not None:
        d["lambda_F"] = args.lambda_f
    if args.lambda_m is not None:
        d["lambda_m"] = args.lambda_m
    if args.mask_mode is not None:
        d["mask_mode"] = args.mask_mode
    if args.seed is not None:
        d["seed"] = args.seed
    if args.iters is not None:
        sched = d["schedule"]
        sched["total_iters"] = args.iters
        sched["densify_end"] = min(sched["densify_end"], args.iters)
        sched["densify_start"] = min(sched["densify_start"],
                                     max(sched["densify_end"] - 1, 0))
    if args.recovery_iters is not None:
        d["schedule"]["recovery_iters"] = args.recovery_iters
    if args.precision is not None:
        d["precision"] = args.precision
    if args.deterministic is not None:
        d["deterministic"] = args.deterministic
    return harness.TrainConfig.from_dict(d)


def _scene_from_args(args, cfg) -> harness.SyntheticScene:
    spec = args.scene or f"{cfg.seed}:200:12:64x64"
    if os.path.exists(spec):
        raise SystemExit("training needs a generated benchmark scene; "
                         "pass --scene seed:N:cams:WxH")
    seed, n, cams, dims = spec.split(":")
    w, h = dims.split("x")
    return harness.generate_scene(int(seed), int(n), int(cams), (int(w), int(h)))


def cmd_verify_gradients(args):
    reports = gradients.verify_mask_gradients(n_rays=args.rays, seed=args.seed,
                                              eps=args.eps)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "gradient_report.jsonl")
    ok = True
    with open(path, "w") as f:
        for r in reports:
            line = {"equation": r.name, "samples": r.samples,
                    "max_rel_err": r.max_rel_err,
                    "max_abs_err_small": r.max_abs_err_small}
            f.write(json.dumps(line) + "\n")
            status = "ok" if r.passes() else "FAIL"
            ok = ok and r.passes()
            print(f"{r.name:12s} samples={r.samples:7d} "
                  f"max_rel={r.max_rel_err:.3e} max_abs_small={r.max_abs_err_small:.3e} "
                  f"[{status}]")
    print(f"report written to {path}")
    return 0 if ok else 1


def cmd_generate_scene(args):
    w, h = args.dims.split("x")
    synth = harness.generate_scene(args.seed, args.gaussians, args.cams,
                                   (int(w), int(h)))
    os.makedirs(args.out_dir, exist_ok=True)
    write_scene(synth.teacher, os.path.join(args.out_dir, "teacher.sms"))
    write_cameras(synth.cameras, os.path.join(args.out_dir, "cameras.txt"))
    for i, img in enumerate(synth.targets):
        save_png(os.path.join(args.out_dir, f"target_{i:02d}.png"), img)
        save_plane(os.path.join(args.out_dir, f"target_{i:02d}.npy"), img)
    print(f"scene seed={args.seed}: {len(synth.teacher)} gaussians, "
          f"{len(synth.cameras)} cameras -> {args.out_dir}")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    synth = _scene_from_args(args, cfg)
    res = harness.train(cfg, synth, out_dir=args.out_dir)
    f = res.final
    print(f"final: iter={f['iteration']} psnr={f['psnr']:.2f} "
          f"ssim={f['ssim']:.4f} gaussians={f['gaussian_count']}")
    print(f"metrics: {os.path.join(args.out_dir, 'metrics.jsonl')}")
    return 0


def cmd_sweep(args):
    cfg = _config_from_args(args)
    synth = _scene_from_args(args, cfg)
    values = [float(v) for v in args.values.split(",")]
    result = harness.sweep(cfg, values, synth, out_dir=args.out_dir)
    for row in result.rows:
        print(f"lambda={row['lambda']:g} final_gs={row['final_gs']} "
              f"psnr={row['psnr']:.2f} ssim={row['ssim']:.4f}")
    return 0


def cmd_ablate(args):
    cfg = _config_from_args(args)
    synth = _scene_from_args(args, cfg)
    result = harness.ablate_forwards(cfg, synth, out_dir=args.out_dir)
    for row in result.rows:
        print(f"{row['mode']:10s} psnr={row['psnr']:.2f} "
              f"ssim={row['ssim']:.4f} final_gs={row['final_gs']}")
    return 0


def cmd_render(args):
    scene = read_scene(args.scene)
    cams = read_cameras(args.cameras)
    cam = cams[args.camera_index]
    options = RenderOptions()
    mode = args.mask_mode if args.mask_mode != "global" else "proposed"
    out = render(scene, cam, masks=None,
                 mode=mode if mode != "none" else "none", options=options)
    os.makedirs(args.out_dir, exist_ok=True)
    img = np.clip(out.rgb, 0.0, 1.0)
    save_png(os.path.join(args.out_dir, "rgb.png"), img)
    save_plane(os.path.join(args.out_dir, "rgb.npy"), img)
    if out.spatial_mask is not None:
        peak = float(out.spatial_mask.max())
        save_png(os.path.join(args.out_dir, "spatial_mask.png"),
                 out.spatial_mask / peak if peak > 0 else out.spatial_mask)
        save_plane(os.path.join(args.out_dir, "spatial_mask.npy"), out.spatial_mask)
    print(f"rendered {args.scene} with camera {args.camera_index} -> {args.out_dir}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="splatmask",
        description="Masked Gaussian-splat compositing, training and verification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-gradients",
                       help="check analytic mask gradients against finite differences")
    p.add_argument("--rays", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_verify_gradients)

    p = sub.add_parser("generate-scene", help="build a synthetic benchmark scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--cams", type=int, default=12)
    p.add_argument("--dims", default="64x64")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate_scene)

    p = sub.add_parser("train", help="one training run")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per lambda value")
    _add_train_flags(p)
    p.add_argument("--values", required=True,
                   help="comma-separated lambda values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="compare the three spatial-mask forwards")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="one-shot image + spatial-mask dump")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--mask-mode", default="proposed",
                   choices=["proposed", "inverse", "cumulative", "none"])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_render)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
