"""Front-to-back compositor for masked Gaussian splats.

Produces the RGB image and, on request, a per-pixel spatial-mask image under
one of three forward designs:

  proposed    F   = sum_i M_i (1 - a_i T_i) / log(1 + N)
  inverse     F_A = sum_i w_i M_i / sum_i w_i,   w_i = 1 / (a_i T_i + eps)
  cumulative  F_B = sum_i M_i (1 - T_i) / log(1 + N)

where a_i is the per-pixel alpha of fragment i, T_i the transmittance before
blending it (T_{i+1} = (1 - M_i a_i) T_i, T_0 = 1) and N the number of
fragments on the ray, masked or not.  The full per-fragment trace is kept so
the backward pass never re-rasterizes.

The semantics are the depth-sorted per-pixel fragment list; tiles are purely
an execution strategy (disjoint pixel blocks, optionally processed by a thread
pool) and never change any output bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._kernels import candidate_fragments, composite_rays, transmittance_sweep
from .errors import ParameterError
from .model import Scene
from .projection import ALPHA_CLAMP, ALPHA_SKIP, Camera, ProjectedSplats, project_scene

MASK_MODES = ("proposed", "inverse", "cumulative", "none")

# Compositing at a pixel stops once T drops below this.
EARLY_STOP_T = 1e-4
INVERSE_EPS = 1e-6


@dataclass
class RenderOptions:
    alpha_skip: float = ALPHA_SKIP   # drop fragments below this alpha; 0 disables
    early_stop: float = EARLY_STOP_T  # stop appending once T < this; 0 disables
    tile: int = 16                   # tile edge for the parallel path
    workers: int = 1                 # >1 processes tiles on a thread pool
    inverse_eps: float = INVERSE_EPS
    dtype: type = np.float64


@dataclass
class Fragments:
    """Flattened per-pixel fragment lists (the rasterization trace).

    Fragments of one pixel are contiguous and depth-sorted (nearest first,
    ties by gaussian id ascending).  `start`/`count` index the run of each
    flat pixel; `T` is the transmittance before blending the fragment.
    """

    pixel: np.ndarray    # (F,) flat pixel index, row-major
    sid: np.ndarray      # (F,) index into the splat arrays
    alpha: np.ndarray    # (F,)
    mask: np.ndarray     # (F,) mask value the forward composited with
    T: np.ndarray        # (F,)
    dx: np.ndarray       # (F,) pixel center minus splat mean, x
    dy: np.ndarray       # (F,)
    clamped: np.ndarray  # (F,) alpha hit the 0.999 clamp
    start: np.ndarray    # (H*W,)
    count: np.ndarray    # (H*W,)
    width: int
    height: int
    splats: ProjectedSplats = None

    def __len__(self) -> int:
        return self.pixel.shape[0]

    @property
    def gaussian_ids(self) -> np.ndarray:
        return self.splats.rows[self.sid]

    def rows_touched(self) -> np.ndarray:
        """Scene rows with at least one fragment."""
        return np.unique(self.splats.rows[self.sid])


@dataclass
class RenderOutputs:
    rgb: np.ndarray                  # (H,W,3), pre-clamp
    spatial_mask: Optional[np.ndarray]  # (H,W) or None for mode "none"
    frag_count: np.ndarray           # (H,W) int32
    trace: Fragments


def _build_subset(pix, sid, alpha, clamped, dx, dy, frag_mask, options, hw):
    """Sort one pixel-disjoint candidate subset and run the transmittance sweep.

    Candidates arrive in depth order (splats are pre-sorted), so a stable sort
    on the pixel key alone yields depth-sorted per-pixel runs.
    """
    order = np.argsort(pix, kind="stable")
    pix = pix[order]
    sid = sid[order]
    alpha = alpha[order]
    clamped = clamped[order]
    dx = dx[order]
    dy = dy[order]
    frag_mask = frag_mask[order]

    if pix.size:
        run_start = np.flatnonzero(np.r_[True, np.diff(pix) != 0])
        run_len = np.diff(np.r_[run_start, pix.size])
    else:
        run_start = np.zeros(0, dtype=np.int64)
        run_len = np.zeros(0, dtype=np.int64)

    T_frag, kept = transmittance_sweep(alpha, frag_mask, run_start, run_len,
                                       options.early_stop, options.dtype)
    if options.early_stop > 0.0 and np.any(kept < run_len):
        rank = np.arange(pix.shape[0], dtype=np.int64) - np.repeat(run_start, run_len)
        keep = rank < np.repeat(kept, run_len)
        return (pix[keep], sid[keep], alpha[keep], frag_mask[keep], T_frag[keep],
                dx[keep], dy[keep], clamped[keep])
    return pix, sid, alpha, frag_mask, T_frag, dx, dy, clamped


def build_fragments(splats: ProjectedSplats, cam: Camera, masks: np.ndarray,
                    options: RenderOptions = None) -> Fragments:
    """Depth-sorted per-pixel fragment lists for culled splats.

    `masks` holds one mask value per scene row; forward compositing uses it
    both for the transmittance recurrence and the early-stop decision.
    """
    options = options or RenderOptions()
    W, H = cam.width, cam.height
    hw = H * W
    dtype = options.dtype
    S = len(splats)

    if S == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0, dtype=dtype)
        return Fragments(empty_i, empty_i.astype(np.int32), empty_f, empty_f,
                         empty_f, empty_f, empty_f, np.zeros(0, dtype=bool),
                         np.zeros(hw, dtype=np.int64), np.zeros(hw, dtype=np.int64),
                         W, H, splats)

    # candidates are generated in global depth order (ties by gaussian id) so
    # per-pixel depth sorting reduces to one stable sort on the pixel key
    zorder = np.lexsort((splats.rows, np.asarray(splats.depth, dtype=np.float64)))

    mean = np.asarray(splats.mean2d, dtype=np.float64)[zorder]
    rad = splats.radius[zorder] + 1e-9
    x0 = np.clip(np.ceil(mean[:, 0] - rad[:, 0]), 0, W - 1).astype(np.int64)
    x1 = np.clip(np.floor(mean[:, 0] + rad[:, 0]), 0, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(mean[:, 1] - rad[:, 1]), 0, H - 1).astype(np.int64)
    y1 = np.clip(np.floor(mean[:, 1] + rad[:, 1]), 0, H - 1).astype(np.int64)
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    inside = (mean[:, 0] + rad[:, 0] >= 0) & (mean[:, 0] - rad[:, 0] <= W - 1) & \
             (mean[:, 1] + rad[:, 1] >= 0) & (mean[:, 1] - rad[:, 1] <= H - 1)
    bw = np.where(inside, bw, 0)
    bh = np.where(inside, bh, 0)

    floor = max(options.alpha_skip, 1e-12)
    pix, local, alpha, clamped, dx, dy = candidate_fragments(
        x0, y0, bw, bh, np.asarray(splats.conic, dtype=np.float64)[zorder],
        mean, np.asarray(splats.opacity, dtype=np.float64)[zorder],
        W, floor, dtype)
    sid = zorder[local].astype(np.int32)
    frag_mask = np.asarray(masks, dtype=dtype)[splats.rows[sid]]

    if options.workers > 1 and options.tile > 0:
        t = options.tile
        ntx = (W + t - 1) // t
        tile_id = (pix // W // t) * ntx + (pix % W) // t
        torder = np.argsort(tile_id, kind="stable")
        bounds = np.flatnonzero(np.r_[True, np.diff(tile_id[torder]) != 0])
        bounds = np.r_[bounds, tile_id.shape[0]]
        chunks = [torder[bounds[i]:bounds[i + 1]] for i in range(bounds.size - 1)]

        def run(sel):
            return _build_subset(pix[sel], sid[sel], alpha[sel], clamped[sel],
                                 dx[sel], dy[sel], frag_mask[sel], options, hw)

        with ThreadPoolExecutor(max_workers=options.workers) as pool:
            parts = list(pool.map(run, chunks))
        if parts:
            cols = [np.concatenate([p[k] for p in parts]) for k in range(8)]
        else:
            cols = [np.zeros(0, dtype=a.dtype) for a in
                    (pix, sid, alpha, frag_mask, alpha, dx, dy, clamped)]
        pix, sid, alpha, frag_mask, T_frag, dx, dy, clamped = cols
    else:
        pix, sid, alpha, frag_mask, T_frag, dx, dy, clamped = _build_subset(
            pix, sid, alpha, clamped, dx, dy, frag_mask, options, hw)

    count = np.bincount(pix, minlength=hw).astype(np.int64)
    start = np.zeros(hw, dtype=np.int64)
    if pix.size:
        run_start = np.flatnonzero(np.r_[True, np.diff(pix) != 0])
        start[pix[run_start]] = run_start

    return Fragments(pixel=pix, sid=sid.astype(np.int32), alpha=alpha,
                     mask=frag_mask, T=T_frag, dx=dx, dy=dy, clamped=clamped,
                     start=start, count=count, width=W, height=H, splats=splats)


def _segment_sum(frags: Fragments, values: np.ndarray) -> np.ndarray:
    return np.bincount(frags.pixel, weights=values, minlength=frags.width * frags.height)


def composite_image(frags: Fragments) -> np.ndarray:
    """Eq-style front-to-back blend: c = sum_i M_i a_i c_i T_i per pixel."""
    H, W = frags.height, frags.width
    occ = np.flatnonzero(frags.count)
    rgb = composite_rays(frags.start[occ], frags.count[occ], frags.pixel,
                         frags.alpha, frags.mask, frags.T, frags.sid,
                         np.asarray(frags.splats.view_color), H * W,
                         frags.alpha.dtype if frags.alpha.size else np.float64)
    return rgb.reshape(H, W, 3)


def mask_image(frags: Fragments, mode: str, eps: float = INVERSE_EPS) -> np.ndarray:
    """Spatial-mask plane for one of the three forward designs; empty rays are 0."""
    H, W = frags.height, frags.width
    count = frags.count
    occupied = count > 0
    if mode == "proposed":
        num = _segment_sum(frags, frags.mask * (1.0 - frags.alpha * frags.T))
        out = np.where(occupied, num / np.log1p(np.maximum(count, 1)), 0.0)
    elif mode == "cumulative":
        num = _segment_sum(frags, frags.mask * (1.0 - frags.T))
        out = np.where(occupied, num / np.log1p(np.maximum(count, 1)), 0.0)
    elif mode == "inverse":
        w = 1.0 / (frags.alpha * frags.T + eps)
        num = _segment_sum(frags, w * frags.mask)
        den = _segment_sum(frags, w)
        out = np.where(occupied, num / np.maximum(den, 1e-300), 0.0)
    else:
        raise ParameterError(f"unknown mask mode {mode!r}")
    return out.reshape(H, W).astype(frags.alpha.dtype)


def render(scene: Scene, cam: Camera, masks: Optional[np.ndarray] = None,
           mode: str = "none", options: RenderOptions = None) -> RenderOutputs:
    """Full render pass: project, rasterize, composite, optional mask plane."""
    options = options or RenderOptions()
    if mode not in MASK_MODES:
        raise ParameterError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")
    if cam.width < 1 or cam.height < 1:
        raise ParameterError("image dimensions must be >= 1")
    if masks is None:
        masks = np.ones(len(scene))
    splats = project_scene(scene, cam, dtype=options.dtype,
                           alpha_skip=options.alpha_skip)
    frags = build_fragments(splats, cam, masks, options)
    rgb = composite_image(frags)
    spatial = None
    if mode != "none":
        spatial = mask_image(frags, mode, options.inverse_eps)
    return RenderOutputs(rgb=rgb, spatial_mask=spatial,
                         frag_count=frags.count.reshape(cam.height, cam.width).astype(np.int32),
                         trace=frags)


# ---------------------------------------------------------------------------
# Per-ray scalar forms.  These operate on one pixel's fragment arrays (nearest
# first) and accept relaxed mask values in [0,1]; the image-level planes above
# agree with them pixel by pixel.

def ray_transmittance(alpha, mask):
    """T_i before blending fragment i; T_0 = 1."""
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    f = 1.0 - mask * alpha
    T = np.ones(alpha.shape[0], dtype=np.float64)
    if alpha.shape[0] > 1:
        T[1:] = np.cumprod(f[:-1])
    return T


def composite_rgb(alpha, mask, colors):
    """One pixel of the masked blend; returns (rgb, transmittance trace)."""
    T = ray_transmittance(alpha, mask)
    mask = np.asarray(mask, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    rgb = ((mask * alpha * T)[:, None] * np.asarray(colors, dtype=np.float64)).sum(axis=0)
    return rgb, T


def render_mask_proposed(alpha, mask):
    n = np.asarray(alpha).shape[0]
    if n == 0:
        return 0.0
    T = ray_transmittance(alpha, mask)
    return float(np.sum(np.asarray(mask) * (1.0 - np.asarray(alpha) * T)) / np.log1p(n))


def render_mask_inverse(alpha, mask, eps: float = INVERSE_EPS):
    n = np.asarray(alpha).shape[0]
    if n == 0:
        return 0.0
    T = ray_transmittance(alpha, mask)
    w = 1.0 / (np.asarray(alpha) * T + eps)
    return float(np.sum(w * np.asarray(mask)) / np.sum(w))


def render_mask_cumulative(alpha, mask):
    n = np.asarray(alpha).shape[0]
    if n == 0:
        return 0.0
    T = ray_transmittance(alpha, mask)
    return float(np.sum(np.asarray(mask) * (1.0 - T)) / np.log1p(n))


# ---------------------------------------------------------------------------
# Image output helpers.

def save_png(path, img):
    """8-bit PNG of an image in [0,1] (grayscale for 2-d input)."""
    from PIL import Image

    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def save_plane(path, plane):
    """32-bit float binary plane, for metrics and bit-exact comparison."""
    np.save(path, np.asarray(plane, dtype=np.float32))


def load_plane(path):
    return np.load(path)
