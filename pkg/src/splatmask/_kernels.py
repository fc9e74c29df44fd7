"""Hot loops of the rasterizer and backward pass.

Each kernel has a plain-numpy fallback with identical arithmetic order, used
when numba is unavailable or SPLATMASK_NO_JIT is set; outputs are bitwise
identical either way (the transmittance recurrence is one multiply per
fragment in both).
"""

from __future__ import annotations

import os

import numpy as np

USE_JIT = os.environ.get("SPLATMASK_NO_JIT", "") == ""
if USE_JIT:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_JIT = False

if not USE_JIT:  # identity decorator keeps one code path importable
    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True, nogil=True)
def _candidates_jit(x0, y0, bw, bh, conic, mean, opacity, width,
                    floor, alpha_clamp, out_pix, out_sid, out_alpha,
                    out_clamped, out_dx, out_dy):
    k = 0
    for s in range(x0.shape[0]):
        a = conic[s, 0]
        b = conic[s, 1]
        c = conic[s, 2]
        mx = mean[s, 0]
        my = mean[s, 1]
        o = opacity[s]
        # slack keeps the exact alpha >= floor test below authoritative
        qmax = 2.0 * np.log(o / floor) + 1e-9
        for iy in range(bh[s]):
            py = y0[s] + iy
            dy = py - my
            for ix in range(bw[s]):
                px = x0[s] + ix
                dx = px - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > qmax:
                    continue
                raw = o * np.exp(-0.5 * q)
                if raw >= floor:
                    clamped = raw > alpha_clamp
                    out_pix[k] = py * width + px
                    out_sid[k] = s
                    out_alpha[k] = alpha_clamp if clamped else raw
                    out_clamped[k] = clamped
                    out_dx[k] = dx
                    out_dy[k] = dy
                    k += 1
    return k


def _candidates_np(x0, y0, bw, bh, conic, mean, opacity, width,
                   floor, alpha_clamp, out_pix, out_sid, out_alpha,
                   out_clamped, out_dx, out_dy):
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        return 0
    local = np.repeat(np.arange(x0.shape[0], dtype=np.int64), counts)
    offsets = np.concatenate((np.zeros(1, dtype=np.int64), np.cumsum(counts)[:-1]))
    within = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    px = x0[local] + within % bw[local]
    py = y0[local] + within // bw[local]
    dx = px - mean[local, 0]
    dy = py - mean[local, 1]
    q = (conic[local, 0] * dx * dx + 2.0 * conic[local, 1] * dx * dy
         + conic[local, 2] * dy * dy)
    raw = opacity[local] * np.exp(-0.5 * q)
    clamped = raw > alpha_clamp
    alpha = np.where(clamped, raw.dtype.type(alpha_clamp), raw)
    keep = alpha >= floor
    k = int(keep.sum())
    out_pix[:k] = (py * width + px)[keep]
    out_sid[:k] = local[keep]
    out_alpha[:k] = alpha[keep]
    out_clamped[:k] = clamped[keep]
    out_dx[:k] = dx[keep]
    out_dy[:k] = dy[keep]
    return k


def candidate_fragments(x0, y0, bw, bh, conic, mean, opacity, width,
                        floor, dtype):
    """Evaluate per-pixel alphas inside each splat's bounding box.

    Returns (pix, sid, alpha, clamped, dx, dy) for fragments at or above the
    skip threshold, in splat-major (depth) order.
    """
    total = int((bw * bh).sum())
    out_pix = np.empty(total, dtype=np.int64)
    out_sid = np.empty(total, dtype=np.int64)
    out_alpha = np.empty(total, dtype=dtype)
    out_clamped = np.empty(total, dtype=np.bool_)
    out_dx = np.empty(total, dtype=dtype)
    out_dy = np.empty(total, dtype=dtype)
    fn = _candidates_jit if USE_JIT else _candidates_np
    k = fn(x0, y0, bw, bh, conic.astype(dtype), mean.astype(dtype),
           opacity.astype(dtype), width, dtype(floor), dtype(0.999),
           out_pix, out_sid, out_alpha, out_clamped, out_dx, out_dy)
    return (out_pix[:k], out_sid[:k], out_alpha[:k], out_clamped[:k],
            out_dx[:k], out_dy[:k])


@njit(cache=True, nogil=True)
def _sweep_jit(alpha, mask, run_starts, run_lengths, early_stop, T_out, kept_out):
    for r in range(run_starts.shape[0]):
        s = run_starts[r]
        n = run_lengths[r]
        T = 1.0
        kept = n
        for i in range(n):
            idx = s + i
            T_out[idx] = T
            T = T * (1.0 - mask[idx] * alpha[idx])
            if early_stop > 0.0 and T < early_stop and kept == n:
                kept = i + 1
                break
        kept_out[r] = kept


def _sweep_np(alpha, mask, run_starts, run_lengths, early_stop, T_out, kept_out):
    for r in range(run_starts.shape[0]):
        s = int(run_starts[r])
        n = int(run_lengths[r])
        T = 1.0
        kept = n
        for i in range(n):
            idx = s + i
            T_out[idx] = T
            T = T * (1.0 - mask[idx] * alpha[idx])
            if early_stop > 0.0 and T < early_stop:
                kept = i + 1
                break
        kept_out[r] = kept


def transmittance_sweep(alpha, mask, run_starts, run_lengths, early_stop, dtype):
    """Per-fragment T (before blending) and per-run appended count.

    One multiply per fragment, so the stored trace satisfies the transmittance
    recurrence bit-exactly; stops appending once T drops below early_stop.
    """
    T_out = np.empty(alpha.shape[0], dtype=dtype)
    kept = np.empty(run_starts.shape[0], dtype=np.int64)
    fn = _sweep_jit if USE_JIT else _sweep_np
    fn(alpha, mask, run_starts, run_lengths, float(early_stop), T_out, kept)
    return T_out, kept


@njit(cache=True, nogil=True)
def _suffix_jit(values, starts, counts, out):
    for r in range(starts.shape[0]):
        s = starts[r]
        n = counts[r]
        acc = 0.0
        for i in range(n - 1, -1, -1):
            out[s + i] = acc
            acc += values[s + i]


def _suffix_np(values, starts, counts, out):
    for r in range(starts.shape[0]):
        s = int(starts[r])
        n = int(counts[r])
        acc = 0.0
        for i in range(n - 1, -1, -1):
            out[s + i] = acc
            acc += values[s + i]


def segment_suffix_sums(values, starts, counts):
    """Exclusive suffix sum within each segment, exact sequential accumulation.

    `values` is (F,) or (F,K); segments are contiguous runs given by
    starts/counts over occupied pixels.
    """
    out = np.zeros_like(values)
    fn = _suffix_jit if USE_JIT else _suffix_np
    if values.ndim == 1:
        fn(values, starts, counts, out)
    else:
        for k in range(values.shape[1]):
            col = np.ascontiguousarray(values[:, k])
            col_out = np.zeros_like(col)
            fn(col, starts, counts, col_out)
            out[:, k] = col_out
    return out


@njit(cache=True, nogil=True)
def _composite_jit(starts, counts, pix, alpha, mask, T, sid, colors, out):
    for r in range(starts.shape[0]):
        s = starts[r]
        n = counts[r]
        p = pix[s]
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for i in range(s, s + n):
            w = mask[i] * alpha[i] * T[i]
            g = sid[i]
            acc0 += w * colors[g, 0]
            acc1 += w * colors[g, 1]
            acc2 += w * colors[g, 2]
        out[p, 0] = acc0
        out[p, 1] = acc1
        out[p, 2] = acc2


def composite_rays(starts, counts, pix, alpha, mask, T, sid, colors, hw, dtype):
    """Per-pixel masked blend: one forward accumulation per ray."""
    out = np.zeros((hw, 3), dtype=dtype)
    if USE_JIT:
        _composite_jit(starts, counts, pix, alpha, mask, T, sid,
                       colors.astype(dtype), out)
        return out
    weight = mask * alpha * T
    for ch in range(3):
        out[:, ch] = np.bincount(pix, weights=weight * colors[sid, ch],
                                 minlength=hw)
    return out


@njit(cache=True, nogil=True)
def _rgb_backward_jit(starts, counts, pix, alpha, mask, T, sid, clamped,
                      dx, dy, colors, opacity, conic, upstream,
                      d_color, d_op, d_m2d, d_conic, d_alpha, d_mask):
    for r in range(starts.shape[0]):
        s = starts[r]
        n = counts[r]
        p = pix[s]
        u0 = upstream[p, 0]
        u1 = upstream[p, 1]
        u2 = upstream[p, 2]
        suf0 = 0.0
        suf1 = 0.0
        suf2 = 0.0
        for i in range(s + n - 1, s - 1, -1):
            g = sid[i]
            a = alpha[i]
            m = mask[i]
            t = T[i]
            c0 = colors[g, 0]
            c1 = colors[g, 1]
            c2 = colors[g, 2]
            w = m * a * t
            d_color[g, 0] += u0 * w
            d_color[g, 1] += u1 * w
            d_color[g, 2] += u2 * w
            up_dot_c = u0 * c0 + u1 * c1 + u2 * c2
            up_dot_s = u0 * suf0 + u1 * suf1 + u2 * suf2
            inv = 1.0 / (1.0 - a * m)
            da = m * t * up_dot_c - m * inv * up_dot_s
            d_mask[i] = a * t * up_dot_c - a * inv * up_dot_s
            d_alpha[i] = da
            if not clamped[i]:
                d_op[g] += da * a * (1.0 - opacity[g])
                ca = conic[g, 0]
                cb = conic[g, 1]
                cc = conic[g, 2]
                d_m2d[g, 0] += da * a * (ca * dx[i] + cb * dy[i])
                d_m2d[g, 1] += da * a * (cb * dx[i] + cc * dy[i])
                d_conic[g, 0] += da * a * (-0.5 * dx[i] * dx[i])
                d_conic[g, 1] += da * a * (-dx[i] * dy[i])
                d_conic[g, 2] += da * a * (-0.5 * dy[i] * dy[i])
            suf0 += w * c0
            suf1 += w * c1
            suf2 += w * c2
