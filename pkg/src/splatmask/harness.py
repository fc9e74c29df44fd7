"""End-to-end trainer, synthetic benchmark scenes, and experiment runners.

Supervision is self-consistent: target images are rendered by this same
pipeline from a hidden teacher Gaussian set with every mask on, so there is no
model mismatch and desk-scale runs isolate the effect of the regularizers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .errors import ParameterError
from .gradients import (MASK_ALPHA_GRADS, MASK_GRADS, alpha_backward,
                        fused_rgb_backward)
from .model import LOGIT_CLAMP, Scene, sample_masks, write_scene
from .optim import Adam, expon_lr
from .projection import Camera, project_backward
from .rasterizer import RenderOptions, mask_image, render, save_png, save_plane
from .schedule import Action, ScheduleConfig, actions_at, densify, prune

SPATIAL_MODES = ("proposed", "inverse", "cumulative")
TRAIN_MODES = SPATIAL_MODES + ("global", "none")


@dataclass
class LearningRates:
    position: float = 1.6e-4        # scaled by scene extent, log-decayed
    position_final: float = 1.6e-6
    scale: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    mask_logit: float = 1e-2


@dataclass
class TrainConfig:
    lambda_F: float = 1e-4
    lambda_m: float = 0.0
    mask_mode: str = "proposed"     # proposed|inverse|cumulative|global|none
    temperature: float = 0.5
    mask_logit_init: float = 3.0
    # training-time ceiling on mask logits: keeps the dropout rate nonzero so
    # the scene keeps adapting to each Gaussian's absence (p <= sigmoid(max))
    mask_logit_max: float = 3.0
    seed: int = 0
    precision: str = "64"           # "32" or "64"
    eval_interval: int = 100
    lrs: LearningRates = field(default_factory=LearningRates)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    deterministic: bool = True      # force single-threaded tiles
    workers: int = 1
    convex_blend: bool = False      # 0.8/0.2 variant of the rgb loss
    mask_loss_to_alpha: bool = False  # also push the mask loss into opacities
    inverse_eps: float = 1e-6

    def __post_init__(self):
        if self.mask_mode not in TRAIN_MODES:
            raise ParameterError(f"mask_mode must be one of {TRAIN_MODES}")
        if self.precision not in ("32", "64"):
            raise ParameterError("precision must be '32' or '64'")
        if self.mask_mode == "global" and self.lambda_F != 0.0:
            raise ParameterError("global mode uses lambda_m; set lambda_F=0")
        if self.mask_mode in SPATIAL_MODES and self.lambda_m != 0.0:
            raise ParameterError("spatial modes use lambda_F; set lambda_m=0")
        if self.mask_mode == "none" and (self.lambda_F != 0.0 or self.lambda_m != 0.0):
            raise ParameterError("mode 'none' takes no mask penalty")

    @property
    def dtype(self):
        return np.float64 if self.precision == "64" else np.float32

    @property
    def lambda_active(self) -> float:
        if self.mask_mode in SPATIAL_MODES:
            return self.lambda_F
        if self.mask_mode == "global":
            return self.lambda_m
        return 0.0

    @staticmethod
    def desk(**overrides) -> "TrainConfig":
        """Desk-scale preset: the 30k+5k paper schedule scaled down 10x."""
        sched = ScheduleConfig(
            densify_start=150, densify_end=1500, densify_interval=50,
            prune_interval_late=150, total_iters=3000, recovery_iters=500,
            prune_samples=10, grad_threshold=2e-4,
        )
        cfg = TrainConfig(schedule=sched, **overrides)
        return cfg

    @staticmethod
    def paper(**overrides) -> "TrainConfig":
        """Published schedule: 30k steps plus a 5k recovery phase."""
        return TrainConfig(schedule=ScheduleConfig(), **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "lrs" in d and isinstance(d["lrs"], dict):
            d["lrs"] = LearningRates(**d["lrs"])
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = ScheduleConfig(**d["schedule"])
        return TrainConfig(**d)

    @staticmethod
    def from_file(path) -> "TrainConfig":
        with open(path) as f:
            return TrainConfig.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


@dataclass
class SyntheticScene:
    teacher: Scene
    cameras: list
    targets: np.ndarray   # (C,H,W,3) in [0,1]
    seed: int

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    @property
    def extent(self) -> float:
        return float(max(np.linalg.norm(c.center) for c in self.cameras))


def load_scene_dir(path) -> SyntheticScene:
    """Rebuild a SyntheticScene from a directory written by the scene generator."""
    from .model import read_scene
    from .projection import read_cameras

    teacher = read_scene(os.path.join(path, "teacher.sms"))
    cams = read_cameras(os.path.join(path, "cameras.txt"))
    targets = np.stack([
        np.load(os.path.join(path, f"target_{i:02d}.npy")).astype(np.float64)
        for i in range(len(cams))])
    return SyntheticScene(teacher=teacher, cameras=cams, targets=targets, seed=-1)


def generate_scene(seed: int, n_teacher: int = 200, n_cams: int = 12,
                   dims=(64, 64)) -> SyntheticScene:
    """Random teacher Gaussians in the unit box, a camera ring, rendered targets."""
    if n_teacher < 1 or n_cams < 2:
        raise ParameterError("need n_teacher >= 1 and n_cams >= 2")
    rng = np.random.default_rng(seed)
    w, h = dims

    # The camera frustum at this focal length stays inside the box laterally,
    # so every pixel's ray crosses populated volume and coverage is near-total.
    # Footprints are sized so rays pierce a few dozen splats: spatial-mask
    # dynamics depend on per-ray fragment depth, not just Gaussian count.
    positions = rng.uniform(-0.8, 0.8, (n_teacher, 3))
    opac = rng.uniform(0.3, 0.95, n_teacher)
    opacity_logits = np.log(opac / (1.0 - opac))
    base = rng.uniform(np.log(0.06), np.log(0.14), n_teacher)
    log_scales = base[:, None] + rng.uniform(-0.3, 0.3, (n_teacher, 3))
    rotations = rng.standard_normal((n_teacher, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    colors = rng.uniform(0.05, 0.95, (n_teacher, 1, 3))

    teacher = Scene(
        positions=positions, log_scales=log_scales, rotations=rotations,
        opacity_logits=opacity_logits, color_coeffs=colors,
        mask_logits=np.full(n_teacher, 3.0), uids=np.arange(n_teacher),
        sh_degree=0, next_uid=n_teacher,
    )

    fx = 100.0 * w / 64.0
    fy = 100.0 * h / 64.0
    radius = 2.2
    cams = []
    for k in range(n_cams):
        angle = 2.0 * math.pi * k / n_cams
        z = 0.5 if k % 2 == 0 else -0.5
        eye = (radius * math.cos(angle), radius * math.sin(angle), z)
        cams.append(Camera.look_at(
            eye, (0.0, 0.0, 0.0), fx=fx, fy=fy,
            cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
            width=w, height=h, near=0.4, far=6.0,
        ))

    targets = np.empty((n_cams, h, w, 3))
    for i, cam in enumerate(cams):
        out = render(teacher, cam, masks=None, mode="none")
        targets[i] = np.clip(out.rgb, 0.0, 1.0)
    return SyntheticScene(teacher=teacher, cameras=cams, targets=targets, seed=seed)


def init_scene(synth: SyntheticScene, cfg: TrainConfig,
               rng: np.random.Generator, subsample: int = 4,
               init_opacity: float = 0.1) -> Scene:
    """Default student: every `subsample`-th teacher position, noised.

    Opacities start uniformly low (the usual splat-fitting convention), so the
    optimizer has to earn every Gaussian's visibility; ones that never become
    useful stay faint and are what the sparsity penalty is meant to remove.
    """
    t = synth.teacher
    rows = np.arange(0, len(t), subsample)
    n = rows.size
    rot = t.rotations[rows] + 0.05 * rng.standard_normal((n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    return Scene(
        positions=t.positions[rows] + 0.02 * rng.standard_normal((n, 3)),
        log_scales=t.log_scales[rows] + 0.1 * rng.standard_normal((n, 3)),
        rotations=rot,
        opacity_logits=np.full(n, float(np.log(init_opacity / (1 - init_opacity)))),
        color_coeffs=np.clip(t.color_coeffs[rows]
                             + 0.05 * rng.standard_normal((n, 1, 3)), 0.0, 1.0),
        mask_logits=np.full(n, cfg.mask_logit_init),
        uids=np.arange(n), sh_degree=t.sh_degree, next_uid=n,
    )


@dataclass
class EvalStats:
    psnr: float
    ssim: float
    l1: float


def evaluate_scene(scene: Scene, synth: SyntheticScene,
                   options: RenderOptions = None) -> EvalStats:
    """Mean metrics over all cameras with every mask on (deployment semantics)."""
    options = options or RenderOptions()
    ps, ss, l1s = [], [], []
    for cam, target in zip(synth.cameras, synth.targets):
        img = np.clip(render(scene, cam, masks=None, mode="none", options=options).rgb,
                      0.0, 1.0)
        ps.append(losses.psnr(img, target))
        ss.append(losses.ssim(img, target))
        l1s.append(float(np.mean(np.abs(img - target))))
    return EvalStats(psnr=float(np.mean(ps)), ssim=float(np.mean(ss)),
                     l1=float(np.mean(l1s)))


@dataclass
class TrainResult:
    scene: Scene
    metrics: list
    config: TrainConfig

    def eval_rows(self):
        return [r for r in self.metrics if r.get("kind") == "eval"]

    @property
    def final(self) -> dict:
        return self.eval_rows()[-1]

    def count_curve(self):
        return [(r["iteration"], r["gaussian_count"]) for r in self.eval_rows()]

    @property
    def iter0_rgb_hash(self) -> str:
        for r in self.metrics:
            if r.get("kind") == "start":
                return r["rgb_sha256"]
        return ""


def write_metrics(path, rows):
    with open(path, "wb") as f:
        for row in rows:
            f.write((losses.metrics_line(row) + "\n").encode("ascii"))


def train(cfg: TrainConfig, synth: SyntheticScene, init: Scene = None,
          out_dir=None) -> TrainResult:
    """Run the full optimize/densify/prune/recover loop on a synthetic scene.

    Per iteration: sample masks, render (rgb + mask plane), losses, analytic
    backward, adaptive-moment update, then any schedule actions.  The recovery
    phase renders with every mask on, freezes mask logits and skips both the
    mask loss and all schedule actions.
    """
    sched = cfg.schedule
    dtype = cfg.dtype
    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_mask, rng_cam, rng_sched = (np.random.default_rng(s)
                                              for s in ss.spawn(4))
    if init is None:
        init = init_scene(synth, cfg, rng_init)
    scene = init.copy()
    n_cams = len(synth.cameras)
    extent = synth.extent
    workers = 1 if cfg.deterministic else cfg.workers
    options = RenderOptions(dtype=dtype, workers=workers,
                            inverse_eps=cfg.inverse_eps)

    opt = Adam({
        "position": cfg.lrs.position * extent,
        "log_scale": cfg.lrs.scale,
        "rotation": cfg.lrs.rotation,
        "opacity_logit": cfg.lrs.opacity,
        "color_coeffs": cfg.lrs.color,
        "mask_logit": cfg.lrs.mask_logit,
    })

    accum_grad = np.zeros(len(scene))
    accum_cnt = np.zeros(len(scene), dtype=np.int64)
    metrics = []
    spatial = cfg.mask_mode in SPATIAL_MODES
    lam = cfg.lambda_active
    last_l_mask = 0.0
    target_refs = [losses.SsimReference(t) for t in synth.targets]

    e0 = evaluate_scene(scene, synth, options)
    metrics.append({"kind": "eval", "iteration": 0, "psnr": e0.psnr, "ssim": e0.ssim,
                    "l1": e0.l1, "l_mask": 0.0, "gaussian_count": len(scene),
                    "lambda_F": cfg.lambda_F})

    total_steps = sched.total_iters + sched.recovery_iters
    for it in range(1, total_steps + 1):
        recovery = it > sched.total_iters
        ci = int(rng_cam.integers(n_cams))
        cam = synth.cameras[ci]

        sample = None
        if cfg.mask_mode != "none" and not recovery:
            sample = sample_masks(scene.mask_logits, cfg.temperature, rng_mask)
            masks = sample.hard
        else:
            masks = np.ones(len(scene))

        mode_render = cfg.mask_mode if (spatial and lam > 0 and not recovery) else "none"
        out = render(scene, cam, masks, mode_render, options)
        frags = out.trace
        splats = frags.splats

        img = np.clip(out.rgb, 0.0, 1.0)
        l1, ssim_v, l_rgb, d_img = losses.rgb_loss_grad(img, target_refs[ci],
                                                        cfg.convex_blend)
        up_rgb = np.where(out.rgb <= 1.0, d_img, 0.0)

        l_mask = 0.0
        if mode_render != "none":
            F = out.spatial_mask
            l_mask = losses.spatial_mask_loss(F)
        elif cfg.mask_mode == "global" and not recovery:
            l_mask = float(np.mean(sample.soft) ** 2)
        total = losses.total_loss(l_rgb, l_mask, lam if not recovery else 0.0)
        if not math.isfinite(total):
            if out_dir:
                snap = {"iteration": it, "l1": l1, "ssim": ssim_v,
                        "l_mask": l_mask, "gaussian_count": len(scene)}
                with open(os.path.join(out_dir, "abort_snapshot.json"), "w") as f:
                    json.dump(snap, f, indent=2)
            raise RuntimeError(f"non-finite loss at iteration {it}")
        last_l_mask = l_mask

        # backward: rgb path, then the active mask penalty
        d_viewcolor, d_op, d_m2d, d_con, d_alpha_f, d_mask_f = \
            fused_rgb_backward(frags, up_rgb)
        if mode_render != "none":
            upF = losses.spatial_mask_loss_grad(F, lam).reshape(-1)
            up_frag = upF[frags.pixel]
            if cfg.mask_mode == "inverse":
                d_mask_f = d_mask_f + up_frag * MASK_GRADS["inverse"](frags, cfg.inverse_eps)
            else:
                d_mask_f = d_mask_f + up_frag * MASK_GRADS[cfg.mask_mode](frags)
            if cfg.mask_loss_to_alpha:
                if cfg.mask_mode == "inverse":
                    extra = up_frag * MASK_ALPHA_GRADS["inverse"](frags, cfg.inverse_eps)
                else:
                    extra = up_frag * MASK_ALPHA_GRADS[cfg.mask_mode](frags)
                eo, em, ec = alpha_backward(frags, extra)
                d_op = d_op + eo
                d_m2d = d_m2d + em
                d_con = d_con + ec

        world = project_backward(splats, scene, d_m2d, d_con, d_viewcolor)

        n = len(scene)
        grads = {
            "position": np.zeros((n, 3)), "log_scale": np.zeros((n, 3)),
            "rotation": np.zeros((n, 4)), "opacity_logit": np.zeros(n),
            "color_coeffs": np.zeros_like(scene.color_coeffs),
            "mask_logit": np.zeros(n),
        }
        rows = splats.rows
        grads["position"][rows] = world["position"]
        grads["log_scale"][rows] = world["log_scale"]
        grads["rotation"][rows] = world["rotation"]
        grads["opacity_logit"][rows] = d_op
        grads["color_coeffs"][rows] = world["color_coeffs"]

        skip = set()
        if sample is not None:
            g_mask = np.bincount(frags.gaussian_ids, weights=d_mask_f, minlength=n)
            if cfg.mask_mode == "global":
                g_mask = g_mask + losses.global_mask_loss_grad(sample.soft, lam)
            grads["mask_logit"] = g_mask * sample.dsoft_dlogit
        else:
            skip.add("mask_logit")

        # densify statistics: accumulated screen-space gradient norm per visible splat
        per_splat = np.bincount(frags.sid, minlength=len(splats))
        vis = per_splat > 0
        accum_grad[rows[vis]] += np.linalg.norm(d_m2d[vis], axis=1)
        accum_cnt[rows[vis]] += 1

        opt.lrs["position"] = expon_lr(it, cfg.lrs.position * extent,
                                       cfg.lrs.position_final * extent,
                                       sched.total_iters)
        opt.step(
            {"position": scene.positions, "log_scale": scene.log_scales,
             "rotation": scene.rotations, "opacity_logit": scene.opacity_logits,
             "color_coeffs": scene.color_coeffs, "mask_logit": scene.mask_logits},
            grads, skip=skip)
        scene.normalize_rotations()
        np.clip(scene.mask_logits, -LOGIT_CLAMP, cfg.mask_logit_max,
                out=scene.mask_logits)

        if it == 1:
            metrics.append({"kind": "start", "iteration": 0,
                            "gaussian_count": len(scene),
                            "rgb_sha256": hashlib.sha256(
                                np.ascontiguousarray(out.rgb).tobytes()).hexdigest()})

        if not recovery:
            acts = actions_at(it, sched)
            if Action.DENSIFY in acts:
                mean_norm = np.where(accum_cnt > 0,
                                     accum_grad / np.maximum(accum_cnt, 1), 0.0)
                scene, drep, src = densify(scene, mean_norm, sched, extent, rng_sched)
                opt.remap(src)
                accum_grad = np.zeros(len(scene))
                accum_cnt = np.zeros(len(scene), dtype=np.int64)
                metrics.append({"kind": "event", "iteration": it, "event": "densify",
                                "n_before": drep.n_before, "n_after": drep.n_after,
                                "n_cloned": drep.n_cloned, "n_split": drep.n_split})
            if Action.PRUNE in acts:
                scene, prep, kept = prune(scene, rng_sched, sched.prune_samples)
                opt.remap(kept)
                accum_grad = accum_grad[kept]
                accum_cnt = accum_cnt[kept]
                metrics.append({"kind": "event", "iteration": it, "event": "prune",
                                "n_before": prep.n_before, "n_after": prep.n_after,
                                "removed_checksum": prep.checksum})

        if it % cfg.eval_interval == 0 or it == sched.total_iters or it == total_steps:
            ev = evaluate_scene(scene, synth, options)
            metrics.append({"kind": "eval", "iteration": it, "psnr": ev.psnr,
                            "ssim": ev.ssim, "l1": ev.l1, "l_mask": last_l_mask,
                            "gaussian_count": len(scene), "lambda_F": cfg.lambda_F})

    result = TrainResult(scene=scene, metrics=metrics, config=cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(os.path.join(out_dir, "metrics.jsonl"), metrics)
        write_scene(scene, os.path.join(out_dir, "final_scene.sms"))
    return result


@dataclass
class SweepResult:
    rows: list       # one dict per lambda value
    results: list    # TrainResult per value


def sweep(cfg: TrainConfig, lambda_values, synth: SyntheticScene,
          out_dir=None) -> SweepResult:
    """Train once per lambda with shared seed/scene; tabulate count and quality."""
    rows, results = [], []
    for v in lambda_values:
        d = cfg.to_dict()
        if cfg.mask_mode == "global":
            d["lambda_m"] = float(v)
        else:
            d["lambda_F"] = float(v)
        run_cfg = TrainConfig.from_dict(d)
        sub = os.path.join(out_dir, f"lambda_{v:g}") if out_dir else None
        if sub:
            os.makedirs(sub, exist_ok=True)
        res = train(run_cfg, synth, out_dir=sub)
        rows.append({"lambda": float(v), "final_gs": res.final["gaussian_count"],
                     "psnr": res.final["psnr"], "ssim": res.final["ssim"]})
        results.append(res)
    if out_dir:
        _write_sweep_csv(out_dir, rows, results)
    return SweepResult(rows=rows, results=results)


def _write_sweep_csv(out_dir, rows, results):
    import csv

    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["lambda", "final_gs", "psnr", "ssim"])
        w.writeheader()
        w.writerows(rows)
    with open(os.path.join(out_dir, "count_curves.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lambda", "iteration", "gaussian_count"])
        for row, res in zip(rows, results):
            for it, c in res.count_curve():
                w.writerow([row["lambda"], it, c])


def mask_preview(scene: Scene, cam: Camera, mode: str, temperature: float = 0.5,
                 seed: int = 0, options: RenderOptions = None) -> np.ndarray:
    """Spatial-mask plane under one sampled mask draw (for visual inspection)."""
    options = options or RenderOptions()
    rng = np.random.default_rng(seed)
    sample = sample_masks(scene.mask_logits, temperature, rng)
    out = render(scene, cam, sample.hard, mode, options)
    return out.spatial_mask


@dataclass
class AblateResult:
    rows: list
    results: list


def ablate_forwards(cfg: TrainConfig, synth: SyntheticScene,
                    out_dir=None) -> AblateResult:
    """Train the three spatial-mask forward designs with shared seed and lambda."""
    rows, results = [], []
    for mode in SPATIAL_MODES:
        d = cfg.to_dict()
        d["mask_mode"] = mode
        d["lambda_m"] = 0.0
        run_cfg = TrainConfig.from_dict(d)
        sub = os.path.join(out_dir, mode) if out_dir else None
        if sub:
            os.makedirs(sub, exist_ok=True)
        res = train(run_cfg, synth, out_dir=sub)
        rows.append({"mode": mode, "psnr": res.final["psnr"],
                     "ssim": res.final["ssim"],
                     "final_gs": res.final["gaussian_count"],
                     "iter0_rgb_sha256": res.iter0_rgb_hash})
        results.append(res)
        if sub:
            plane = mask_preview(res.scene, synth.cameras[0], mode,
                                 cfg.temperature, cfg.seed)
            save_plane(os.path.join(sub, "spatial_mask.npy"), plane)
            peak = float(plane.max()) if plane.max() > 0 else 1.0
            save_png(os.path.join(sub, "spatial_mask.png"), plane / peak)
    return AblateResult(rows=rows, results=results)
