"""Training-time control flow: densification, stochastic pruning, timing.

Pruning follows the mask scheme: each Gaussian's existence probability is
sampled a fixed number of times (plain Bernoulli, no temperature; pruning is
forward-only) and Gaussians that never activate are removed.  It fires at
every densification step and, after densification ends, at a fixed late
interval until the end of main training.  The recovery phase does neither.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegenerateSceneError, ParameterError
from .model import Scene, quat_to_rotmat


class Action(Enum):
    DENSIFY = "densify"
    PRUNE = "prune"
    RECOVERY_ONLY = "recovery_only"


@dataclass
class ScheduleConfig:
    densify_start: int = 500
    densify_end: int = 15000
    densify_interval: int = 100
    prune_interval_late: int = 1000
    total_iters: int = 30000
    recovery_iters: int = 5000
    prune_samples: int = 10
    grad_threshold: float = 2e-4
    split_scale_frac: float = 0.01   # max scale above frac*extent splits, else clones
    split_shrink: float = 1.6

    def __post_init__(self):
        if not (self.densify_start < self.densify_end <= self.total_iters):
            raise ParameterError("need densify_start < densify_end <= total_iters")
        if min(self.densify_interval, self.prune_interval_late) < 1:
            raise ParameterError("intervals must be >= 1")


def actions_at(iteration: int, cfg: ScheduleConfig) -> set:
    """Pure timing rule: which schedule events fire at this iteration."""
    if iteration > cfg.total_iters:
        return {Action.RECOVERY_ONLY}
    acts = set()
    if (cfg.densify_start <= iteration <= cfg.densify_end
            and iteration % cfg.densify_interval == 0):
        acts.add(Action.DENSIFY)
        acts.add(Action.PRUNE)
    elif (cfg.densify_end < iteration <= cfg.total_iters
            and iteration % cfg.prune_interval_late == 0):
        acts.add(Action.PRUNE)
    return acts


@dataclass
class PruneReport:
    n_before: int
    n_after: int
    removed_uids: list
    checksum: str


def prune(scene: Scene, rng: np.random.Generator, prune_samples: int = 10):
    """Remove Gaussians whose mask never activates in `prune_samples` draws.

    Returns (scene, report, kept_rows); survivors are bit-identical to their
    previous selves (removal is the only mutation).
    """
    if prune_samples < 1:
        raise ParameterError("prune_samples must be >= 1")
    p = scene.mask_probs()
    draws = rng.random((len(scene), prune_samples)) < p[:, None]
    keep = draws.any(axis=1)
    if not keep.any():
        raise DegenerateSceneError("pruning would remove every Gaussian")
    kept_rows = np.flatnonzero(keep)
    removed = [int(u) for u in scene.uids[~keep]]
    digest = hashlib.sha256(",".join(str(u) for u in removed).encode()).hexdigest()[:16]
    report = PruneReport(n_before=len(scene), n_after=int(keep.sum()),
                         removed_uids=removed, checksum=digest)
    return scene.select(kept_rows), report, kept_rows


@dataclass
class DensifyReport:
    n_before: int
    n_cloned: int
    n_split: int
    n_after: int


def densify(scene: Scene, mean_grad_norm: np.ndarray, cfg: ScheduleConfig,
            extent: float, rng: np.random.Generator):
    """Clone small / split large Gaussians whose positional gradient is high.

    Children inherit the parent's mask logit.  Splits replace the parent by two
    children with per-axis scale reduced by `split_shrink` and positions drawn
    from the parent's own distribution; clones are offset within one standard
    deviation along the parent's principal axes.

    Returns (scene, report, source_rows) where source_rows maps new rows to the
    old rows they came from (-1 for fresh Gaussians) for optimizer-state remap.
    """
    n = len(scene)
    over = np.asarray(mean_grad_norm) > cfg.grad_threshold
    max_scale = np.exp(scene.log_scales).max(axis=1)
    split_sel = over & (max_scale > cfg.split_scale_frac * extent)
    clone_sel = over & ~split_sel

    keep_rows = np.flatnonzero(~split_sel)
    out = scene.select(keep_rows)
    out.next_uid = scene.next_uid
    source = [keep_rows]

    clone_rows = np.flatnonzero(clone_sel)
    if clone_rows.size:
        R = quat_to_rotmat(scene.rotations[clone_rows])
        s = np.exp(scene.log_scales[clone_rows])
        offs = np.einsum("nij,nj->ni", R, s * rng.uniform(-1.0, 1.0, (clone_rows.size, 3)))
        out.append_arrays(
            positions=scene.positions[clone_rows] + offs,
            log_scales=scene.log_scales[clone_rows].copy(),
            rotations=scene.rotations[clone_rows].copy(),
            opacity_logits=scene.opacity_logits[clone_rows].copy(),
            color_coeffs=scene.color_coeffs[clone_rows].copy(),
            mask_logits=scene.mask_logits[clone_rows].copy(),
        )
        source.append(np.full(clone_rows.size, -1, dtype=np.int64))

    split_rows = np.flatnonzero(split_sel)
    if split_rows.size:
        parents = np.repeat(split_rows, 2)
        R = quat_to_rotmat(scene.rotations[parents])
        s = np.exp(scene.log_scales[parents])
        offs = np.einsum("nij,nj->ni", R, s * rng.standard_normal((parents.size, 3)))
        out.append_arrays(
            positions=scene.positions[parents] + offs,
            log_scales=scene.log_scales[parents] - np.log(cfg.split_shrink),
            rotations=scene.rotations[parents].copy(),
            opacity_logits=scene.opacity_logits[parents].copy(),
            color_coeffs=scene.color_coeffs[parents].copy(),
            mask_logits=scene.mask_logits[parents].copy(),
        )
        source.append(np.full(parents.size, -1, dtype=np.int64))

    report = DensifyReport(n_before=n, n_cloned=int(clone_rows.size),
                           n_split=int(split_rows.size), n_after=len(out))
    return out, report, np.concatenate(source)
