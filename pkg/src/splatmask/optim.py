"""First-order adaptive-moment optimizer over named parameter groups.

Moment state is row-aligned with the Gaussian arrays; `remap` keeps it
consistent across densify/prune events (new rows start with zero moments,
removed rows are dropped).
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict, skip=()):
        """Update each named array in place; groups in `skip` are left alone."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if name in skip or name not in grads:
                continue
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p, dtype=np.float64)
                self.v[name] = np.zeros_like(p, dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lrs[name] / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p -= update.astype(p.dtype)

    def remap(self, source_rows: np.ndarray):
        """Re-index moment rows after a scene mutation.

        source_rows[i] is the old row now living at row i, or -1 for a row
        that did not exist before (fresh Gaussian, zero moments).
        """
        source_rows = np.asarray(source_rows)
        fresh = source_rows < 0
        src = np.where(fresh, 0, source_rows)
        for name in list(self.m):
            m = self.m[name][src].copy()
            v = self.v[name][src].copy()
            m[fresh] = 0.0
            v[fresh] = 0.0
            self.m[name] = m
            self.v[name] = v


def expon_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if step >= max_steps:
        return lr_final
    t = step / max_steps
    return float(np.exp((1.0 - t) * np.log(lr_init) + t * np.log(lr_final)))
