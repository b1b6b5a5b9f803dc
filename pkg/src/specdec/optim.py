"""Adam with optional global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_global_norm(grads: dict[Tensor, np.ndarray], params, max_norm: float) -> float:
    """Scale the gradients of ``params`` in place so their joint L2 norm is
    at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        g = grads.get(p)
        if g is not None:
            sq += float(np.sum(g.astype(np.float64) ** 2))
    norm = sq**0.5
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            g = grads.get(p)
            if g is not None:
                grads[p] = g * np.asarray(factor, dtype=g.dtype)
    return norm


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]):
        if self.clip_norm is not None:
            clip_global_norm(grads, self.params, self.clip_norm)
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            m = self._m[i]
            v = self._v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= np.asarray(self.lr, dtype=p.data.dtype) * update.astype(p.data.dtype)
