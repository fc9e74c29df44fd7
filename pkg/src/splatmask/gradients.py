"""Analytic backward passes for the spatial-mask forwards and RGB compositing.

All mask gradients decompose into a self term (the fragment's own contribution
to F) and an occlusion term (the effect of the fragment's opacity on the
transmittance of everything behind it).  The occlusion coupling is a suffix
sum over deeper fragments, evaluated in O(N) per ray with one backward sweep;
the inverse-weighting design's pairwise coupling also reduces to a suffix sum
after factoring out the i-dependent part.

A generic central-difference oracle (`fd_oracle`) is the independent check for
every formula here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import segment_suffix_sums
from .errors import OracleError
from .rasterizer import Fragments, _segment_sum, ray_transmittance

INVERSE_EPS = 1e-6


@dataclass
class GradAccumulator:
    """Per-Gaussian gradient sums, aligned with scene rows."""

    d_mask_logit: np.ndarray   # (N,)
    d_color: np.ndarray        # (N,B,3)
    d_opacity_logit: np.ndarray  # (N,)
    d_mean2d: np.ndarray       # (N,2)
    d_conic: np.ndarray        # (N,3)
    d_position: np.ndarray     # (N,3)
    d_log_scale: np.ndarray    # (N,3)
    d_rotation: np.ndarray     # (N,4)

    @staticmethod
    def zeros(n: int, num_basis: int) -> "GradAccumulator":
        return GradAccumulator(
            d_mask_logit=np.zeros(n), d_color=np.zeros((n, num_basis, 3)),
            d_opacity_logit=np.zeros(n), d_mean2d=np.zeros((n, 2)),
            d_conic=np.zeros((n, 3)), d_position=np.zeros((n, 3)),
            d_log_scale=np.zeros((n, 3)), d_rotation=np.zeros((n, 4)),
        )


def _suffix_sums(frags: Fragments, values: np.ndarray) -> np.ndarray:
    """Per fragment i, the sum of `values` over fragments j > i of the same ray.

    `values` may be (F,) or (F,K); one exact reverse accumulation per ray.
    """
    if values.shape[0] == 0:
        return np.zeros_like(values)
    occ = np.flatnonzero(frags.count)
    return segment_suffix_sums(values, frags.start[occ], frags.count[occ])


def _per_fragment_norm(frags: Fragments) -> np.ndarray:
    return np.log1p(frags.count.astype(np.float64))[frags.pixel]


def grad_mask_proposed(frags: Fragments) -> np.ndarray:
    """dF/dM_i = [ (1 - a_i T_i) + a_i/(1 - a_i M_i) * sum_{j>i} M_j a_j T_j ] / log(1+N)."""
    a, m, T = frags.alpha, frags.mask, frags.T
    suf = _suffix_sums(frags, m * a * T)
    return ((1.0 - a * T) + a / (1.0 - a * m) * suf) / _per_fragment_norm(frags)


def grad_mask_cumulative(frags: Fragments) -> np.ndarray:
    """dF_B/dM_i = [ (1 - T_i) + a_i/(1 - a_i M_i) * sum_{j>i} M_j T_j ] / log(1+N)."""
    a, m, T = frags.alpha, frags.mask, frags.T
    suf = _suffix_sums(frags, m * T)
    return ((1.0 - T) + a / (1.0 - a * m) * suf) / _per_fragment_norm(frags)


def grad_mask_inverse(frags: Fragments, eps: float = INVERSE_EPS) -> np.ndarray:
    """dF_A/dM_i = (1/S) [ w_i + sum_{j>i} (M_j - F_A) dw_j/dM_i ].

    dw_j/dM_i = a_i a_j T_j / ((1 - a_i M_i)(a_j T_j + eps)^2) factors into an
    i-part times a j-part, so the pairwise sum is a single suffix sum.
    """
    a, m, T = frags.alpha, frags.mask, frags.T
    s = a * T
    w = 1.0 / (s + eps)
    S_px = _segment_sum(frags, w)
    FA_px = np.where(S_px > 0, _segment_sum(frags, w * m) / np.maximum(S_px, 1e-300), 0.0)
    S_f = S_px[frags.pixel]
    FA_f = FA_px[frags.pixel]
    u = (m - FA_f) * s * w * w
    suf = _suffix_sums(frags, u)
    return (w + a / (1.0 - a * m) * suf) / S_f


def grad_alpha_mask_proposed(frags: Fragments) -> np.ndarray:
    """dF/da_i when the mask loss is allowed to reach opacities (optional path)."""
    a, m, T = frags.alpha, frags.mask, frags.T
    suf = _suffix_sums(frags, m * a * T)
    return (-m * T + m / (1.0 - a * m) * suf) / _per_fragment_norm(frags)


def grad_alpha_mask_cumulative(frags: Fragments) -> np.ndarray:
    a, m, T = frags.alpha, frags.mask, frags.T
    suf = _suffix_sums(frags, m * T)
    return (m / (1.0 - a * m) * suf) / _per_fragment_norm(frags)


def grad_alpha_mask_inverse(frags: Fragments, eps: float = INVERSE_EPS) -> np.ndarray:
    a, m, T = frags.alpha, frags.mask, frags.T
    s = a * T
    w = 1.0 / (s + eps)
    S_px = _segment_sum(frags, w)
    FA_px = np.where(S_px > 0, _segment_sum(frags, w * m) / np.maximum(S_px, 1e-300), 0.0)
    S_f = S_px[frags.pixel]
    FA_f = FA_px[frags.pixel]
    u = (m - FA_f) * s * w * w
    suf = _suffix_sums(frags, u)
    own = -(m - FA_f) * T * w * w
    return (own + m / (1.0 - a * m) * suf) / S_f


MASK_GRADS = {
    "proposed": grad_mask_proposed,
    "cumulative": grad_mask_cumulative,
    "inverse": grad_mask_inverse,
}

MASK_ALPHA_GRADS = {
    "proposed": grad_alpha_mask_proposed,
    "cumulative": grad_alpha_mask_cumulative,
    "inverse": grad_alpha_mask_inverse,
}


def _single_ray(alpha, mask) -> Fragments:
    """Wrap one ray's fragments as a 1-pixel trace so the image-level formulas apply."""
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    n = alpha.shape[0]
    z = np.zeros(n, dtype=np.float64)
    return Fragments(
        pixel=np.zeros(n, dtype=np.int64), sid=np.zeros(n, dtype=np.int32),
        alpha=alpha, mask=mask, T=ray_transmittance(alpha, mask),
        dx=z, dy=z, clamped=np.zeros(n, dtype=bool),
        start=np.zeros(1, dtype=np.int64), count=np.array([n], dtype=np.int64),
        width=1, height=1, splats=None,
    )


def ray_grad_mask_proposed(alpha, mask) -> np.ndarray:
    return grad_mask_proposed(_single_ray(alpha, mask))


def ray_grad_mask_cumulative(alpha, mask) -> np.ndarray:
    return grad_mask_cumulative(_single_ray(alpha, mask))


def ray_grad_mask_inverse(alpha, mask, eps: float = INVERSE_EPS) -> np.ndarray:
    return grad_mask_inverse(_single_ray(alpha, mask), eps)


def rgb_backward(frags: Fragments, upstream: np.ndarray):
    """Chain an upstream (H,W,3) image gradient through the masked blend.

    Returns (d_view_color per splat (S,3), d_alpha per fragment,
    d_mask per fragment).  d_alpha/d_mask carry both the fragment's own color
    term and the occlusion term on deeper fragments.
    """
    a, m, T = frags.alpha, frags.mask, frags.T
    colors = np.asarray(frags.splats.view_color, dtype=np.float64)[frags.sid]
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, 3)[frags.pixel]

    nsplat = len(frags.splats)
    weight = m * a * T
    d_view_color = np.empty((nsplat, 3))
    for ch in range(3):
        d_view_color[:, ch] = np.bincount(frags.sid, weights=up[:, ch] * weight,
                                          minlength=nsplat)

    suf = _suffix_sums(frags, (m * a * T)[:, None] * colors)  # (F,3)
    up_dot_c = np.einsum("fc,fc->f", up, colors)
    up_dot_s = np.einsum("fc,fc->f", up, suf)
    inv = 1.0 / (1.0 - a * m)
    d_alpha = m * T * up_dot_c - m * inv * up_dot_s
    d_mask = a * T * up_dot_c - a * inv * up_dot_s
    return d_view_color, d_alpha, d_mask


def alpha_backward(frags: Fragments, d_alpha: np.ndarray):
    """Per-fragment d_alpha -> per-splat opacity-logit, mean2d and conic grads.

    Fragments whose alpha hit the 0.999 clamp contribute nothing (subgradient
    zero on the flat side).
    """
    nsplat = len(frags.splats)
    da = np.where(frags.clamped, 0.0, np.asarray(d_alpha, dtype=np.float64))
    a = frags.alpha
    opac = np.asarray(frags.splats.opacity, dtype=np.float64)[frags.sid]
    con = np.asarray(frags.splats.conic, dtype=np.float64)[frags.sid]
    dx, dy = frags.dx, frags.dy

    d_op_logit = np.bincount(frags.sid, weights=da * a * (1.0 - opac), minlength=nsplat)

    cd_x = con[:, 0] * dx + con[:, 1] * dy
    cd_y = con[:, 1] * dx + con[:, 2] * dy
    d_mean2d = np.stack([
        np.bincount(frags.sid, weights=da * a * cd_x, minlength=nsplat),
        np.bincount(frags.sid, weights=da * a * cd_y, minlength=nsplat),
    ], axis=1)

    d_conic = np.stack([
        np.bincount(frags.sid, weights=da * a * (-0.5 * dx * dx), minlength=nsplat),
        np.bincount(frags.sid, weights=da * a * (-dx * dy), minlength=nsplat),
        np.bincount(frags.sid, weights=da * a * (-0.5 * dy * dy), minlength=nsplat),
    ], axis=1)
    return d_op_logit, d_mean2d, d_conic


def fused_rgb_backward(frags: Fragments, upstream: np.ndarray):
    """rgb_backward + alpha_backward in one pass over the trace.

    Returns (d_view_color, d_opacity_logit, d_mean2d, d_conic, d_alpha, d_mask)
    with the per-splat arrays aligned to the splat set.  Equal to composing
    the two-step functions up to float reassociation of the per-splat sums.
    """
    from ._kernels import USE_JIT, _rgb_backward_jit

    nsplat = len(frags.splats)
    if not USE_JIT:
        d_color, d_alpha, d_mask = rgb_backward(frags, upstream)
        d_op, d_m2d, d_conic = alpha_backward(frags, d_alpha)
        return d_color, d_op, d_m2d, d_conic, d_alpha, d_mask
    occ = np.flatnonzero(frags.count)
    d_color = np.zeros((nsplat, 3))
    d_op = np.zeros(nsplat)
    d_m2d = np.zeros((nsplat, 2))
    d_conic = np.zeros((nsplat, 3))
    d_alpha = np.zeros(len(frags))
    d_mask = np.zeros(len(frags))
    _rgb_backward_jit(
        frags.start[occ], frags.count[occ], frags.pixel,
        np.asarray(frags.alpha, dtype=np.float64),
        np.asarray(frags.mask, dtype=np.float64),
        np.asarray(frags.T, dtype=np.float64), frags.sid, frags.clamped,
        np.asarray(frags.dx, dtype=np.float64),
        np.asarray(frags.dy, dtype=np.float64),
        np.asarray(frags.splats.view_color, dtype=np.float64),
        np.asarray(frags.splats.opacity, dtype=np.float64),
        np.asarray(frags.splats.conic, dtype=np.float64),
        np.asarray(upstream, dtype=np.float64).reshape(-1, 3),
        d_color, d_op, d_m2d, d_conic, d_alpha, d_mask)
    return d_color, d_op, d_m2d, d_conic, d_alpha, d_mask


def fd_oracle(forward, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(p + h e_k) - f(p - h e_k)) / 2h per coordinate."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.empty(params.size)
    flat = params.ravel().copy()
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + h
        fp = forward(flat.reshape(params.shape))
        flat[k] = saved - h
        fm = forward(flat.reshape(params.shape))
        flat[k] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite forward value at coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(params.shape)


@dataclass
class EquationReport:
    name: str
    samples: int
    max_rel_err: float      # over coordinates with gradient magnitude >= small_floor
    max_abs_err_small: float  # over coordinates below the floor
    small_floor: float = 1e-3

    def passes(self, rel_tol: float = 1e-6, abs_tol: float = 1e-9) -> bool:
        return self.max_rel_err <= rel_tol and self.max_abs_err_small <= abs_tol


def _compare(analytic: np.ndarray, numeric: np.ndarray, small_floor: float = 1e-3):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    big = scale >= small_floor
    rel = float(np.max(err[big] / scale[big])) if big.any() else 0.0
    abs_small = float(np.max(err[~big])) if (~big).any() else 0.0
    return rel, abs_small


def verify_mask_gradients(n_rays: int = 1000, seed: int = 0, max_frags: int = 64,
                          eps: float = INVERSE_EPS, h: float = 1e-5):
    """Check all three analytic mask gradients against central differences.

    Rays are random (N in 1..max_frags, alpha in [0.01, 0.99], relaxed masks in
    (0.05, 0.95)); returns one EquationReport per forward design.
    """
    from .rasterizer import (render_mask_cumulative, render_mask_inverse,
                             render_mask_proposed)

    rng = np.random.default_rng(seed)
    cases = {
        "proposed": (render_mask_proposed, ray_grad_mask_proposed),
        "inverse": (lambda a, m: render_mask_inverse(a, m, eps),
                    lambda a, m: ray_grad_mask_inverse(a, m, eps)),
        "cumulative": (render_mask_cumulative, ray_grad_mask_cumulative),
    }
    stats = {name: [0.0, 0.0, 0] for name in cases}
    for _ in range(n_rays):
        n = int(rng.integers(1, max_frags + 1))
        alpha = rng.uniform(0.01, 0.99, size=n)
        mask = rng.uniform(0.05, 0.95, size=n)
        for name, (fwd, bwd) in cases.items():
            analytic = bwd(alpha, mask)
            numeric = fd_oracle(lambda mm: fwd(alpha, mm), mask, h=h)
            rel, abs_small = _compare(analytic, numeric)
            stats[name][0] = max(stats[name][0], rel)
            stats[name][1] = max(stats[name][1], abs_small)
            stats[name][2] += n
    return [EquationReport(name, s[2], s[0], s[1]) for name, s in stats.items()]


def density_scaling_samples(p: float, n_rays: int, n_frags: int = 32,
                            seed: int = 0) -> np.ndarray:
    """Per-ray mean |dF/dM| with masks drawn Bernoulli(p), alpha ~ U[0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    out = np.empty(n_rays)
    for i in range(n_rays):
        alpha = rng.uniform(0.1, 0.9, size=n_frags)
        mask = (rng.random(n_frags) < p).astype(np.float64)
        out[i] = np.mean(np.abs(ray_grad_mask_proposed(alpha, mask)))
    return out
