"""Reconstruction loss (L1 + 1-SSIM), mask regularizers, quality metrics.

SSIM follows the universal reference convention: 11x11 Gaussian window with
sigma 1.5, stabilizers C1 = 0.01^2 and C2 = 0.03^2 on unit dynamic range,
statistics over fully-contained windows only, averaged over channels.  The
backward pass is derived analytically (the window statistics are linear or
quadratic images, so the chain rule reduces to three adjoint filterings).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gaussian_kernel() -> np.ndarray:
    r = SSIM_WINDOW // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_RADIUS = SSIM_WINDOW // 2


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over fully-contained positions; channels ride along."""
    t = correlate1d(img, _KERNEL, axis=0, mode="constant")
    t = correlate1d(t, _KERNEL, axis=1, mode="constant")
    return t[_RADIUS:-_RADIUS, _RADIUS:-_RADIUS]


def _filter_valid_adjoint(grad_valid: np.ndarray, shape) -> np.ndarray:
    full = np.zeros(shape, dtype=np.float64)
    full[_RADIUS:-_RADIUS, _RADIUS:-_RADIUS] = grad_valid
    t = correlate1d(full, _KERNEL, axis=0, mode="constant")
    return correlate1d(t, _KERNEL, axis=1, mode="constant")


def _as_hwc(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ParameterError("image smaller than the SSIM window")
    return a


class SsimReference:
    """Window statistics of a fixed reference image, reusable across calls."""

    def __init__(self, image: np.ndarray):
        self.image = _as_hwc(image)
        self.mu = _filter_valid(self.image)
        self.m2 = _filter_valid(self.image * self.image)
        self.var = self.m2 - self.mu ** 2


def _ssim_core(x: np.ndarray, ref: SsimReference, want_grad: bool):
    y = ref.image
    mu_x = _filter_valid(x)
    m2 = _filter_valid(x * x)
    mxy = _filter_valid(x * y)
    mu_y = ref.mu
    var_x = m2 - mu_x ** 2
    var_y = ref.var
    cov = mxy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    u = 1.0 / smap.size
    denom = b1 * b2
    dS_dA1 = a2 / denom
    dS_dB1 = -smap / b1
    dS_dvar = -smap / b2
    dS_dcov = 2.0 * a1 / denom
    dS_dmu = 2.0 * mu_y * dS_dA1 + 2.0 * mu_x * dS_dB1
    g_m1 = u * (dS_dmu - 2.0 * mu_x * dS_dvar - mu_y * dS_dcov)
    g_m2 = u * dS_dvar
    g_mxy = u * dS_dcov
    grad = (_filter_valid_adjoint(g_m1, x.shape)
            + _filter_valid_adjoint(g_m2, x.shape) * (2.0 * x)
            + _filter_valid_adjoint(g_mxy, x.shape) * y)
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over channels, fully-contained 11x11 Gaussian windows."""
    a0 = np.asarray(a)
    b0 = np.asarray(b)
    if a0.shape != b0.shape:
        raise ParameterError(f"image shapes differ: {a0.shape} vs {b0.shape}")
    value, _ = _ssim_core(_as_hwc(a0), SsimReference(b0), False)
    return value


def ssim_with_grad(a: np.ndarray, b):
    """(ssim, d ssim / d a); b is the constant reference (image or SsimReference)."""
    a0 = np.asarray(a)
    ref = b if isinstance(b, SsimReference) else SsimReference(np.asarray(b))
    x = _as_hwc(a0)
    if x.shape != ref.image.shape:
        raise ParameterError(f"image shapes differ: {a0.shape} vs {ref.image.shape[:a0.ndim]}")
    value, grad = _ssim_core(x, ref, True)
    return value, grad.reshape(a0.shape)


def rgb_loss(rendered: np.ndarray, target: np.ndarray, convex_blend: bool = False):
    """(l1, ssim, l_rgb) with l_rgb = l1 + (1 - ssim).

    `convex_blend` switches to the 0.8/0.2 mix some splatting codebases use.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ParameterError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    l1 = float(np.mean(np.abs(rendered - target)))
    s = ssim(rendered, target)
    if convex_blend:
        l_rgb = 0.8 * l1 + 0.2 * (1.0 - s)
    else:
        l_rgb = l1 + (1.0 - s)
    return l1, s, l_rgb


def rgb_loss_grad(rendered: np.ndarray, target, convex_blend: bool = False):
    """(l1, ssim, l_rgb, d l_rgb / d rendered).

    `target` may be an image or a precomputed SsimReference (the training loop
    reuses reference statistics across iterations).
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    ref = target if isinstance(target, SsimReference) else SsimReference(np.asarray(target))
    if ref.image.size != rendered.size or ref.image.shape[:2] != rendered.shape[:2]:
        raise ParameterError(
            f"image shapes differ: {rendered.shape} vs {ref.image.shape}")
    t_img = ref.image.reshape(rendered.shape)
    l1 = float(np.mean(np.abs(rendered - t_img)))
    d_l1 = np.sign(rendered - t_img) / rendered.size
    s, d_s = ssim_with_grad(rendered, ref)
    if convex_blend:
        l_rgb = 0.8 * l1 + 0.2 * (1.0 - s)
        grad = 0.8 * d_l1 - 0.2 * d_s
    else:
        l_rgb = l1 + (1.0 - s)
        grad = d_l1 - d_s
    return l1, s, l_rgb, grad


def global_mask_loss(mask_soft_values: np.ndarray, lambda_m: float) -> float:
    """lambda_m * (mean mask value)^2, the global (baseline) regularizer."""
    m = np.asarray(mask_soft_values, dtype=np.float64)
    if m.size < 1:
        raise ParameterError("need at least one mask value")
    return float(lambda_m * m.mean() ** 2)


def global_mask_loss_grad(mask_soft_values: np.ndarray, lambda_m: float) -> np.ndarray:
    m = np.asarray(mask_soft_values, dtype=np.float64)
    return np.full(m.shape, 2.0 * lambda_m * m.mean() / m.size)


def spatial_mask_loss(spatial_mask: np.ndarray) -> float:
    """Mean energy of the spatial-mask image: mean of squared entries."""
    f = np.asarray(spatial_mask, dtype=np.float64)
    return float(np.mean(f * f))


def spatial_mask_loss_grad(spatial_mask: np.ndarray, lambda_f: float) -> np.ndarray:
    """Upstream gradient into each pixel of the mask plane: 2 lambda F / (HW)."""
    f = np.asarray(spatial_mask, dtype=np.float64)
    return 2.0 * lambda_f * f / f.size


def total_loss(l_rgb: float, l_mask: float, lambda_f: float) -> float:
    if lambda_f < 0:
        raise ParameterError("lambda must be >= 0")
    return l_rgb + lambda_f * l_mask


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit range; +inf when the images match exactly."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ParameterError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    mse = float(np.mean((rendered - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class LossReport:
    l1: float
    ssim: float
    l_rgb: float
    l_mask: float
    total: float
    lambda_used: float


def metrics_line(record: dict) -> str:
    """One canonical JSON line; infinities serialized as the string \"inf\"."""
    safe = {}
    for k, v in record.items():
        if isinstance(v, float) and not math.isfinite(v):
            safe[k] = "inf" if v > 0 else "-inf"
        elif isinstance(v, (np.floating, np.integer)):
            safe[k] = v.item()
        else:
            safe[k] = v
    return json.dumps(safe)
