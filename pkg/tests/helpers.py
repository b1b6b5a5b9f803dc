"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from specdec.tensor import GradTape, Tensor, backward


def fd_gradcheck(build, params, eps=1e-3, rtol=1e-4, atol=1e-8, max_elems=None, rng=None):
    """Compare tape gradients of ``build()`` against central differences.

    ``build`` must construct the scalar loss from scratch on every call,
    reading the (float64) ``params`` tensors in place.  When ``max_elems``
    is set, a seeded subset of each parameter's elements is perturbed.
    """
    with GradTape() as tape:
        loss = build()
    grads = backward(loss, tape)
    for p in params:
        g = grads.get(p)
        assert g is not None, "parameter missing from gradient map"
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            assert rng is not None
            idxs = rng.choice(flat.size, size=max_elems, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            up = build().item()
            flat[i] = orig - eps
            dn = build().item()
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            err = abs(gflat[i] - fd)
            assert err <= rtol * max(abs(gflat[i]), abs(fd)) + atol, (
                f"grad mismatch at flat index {i}: analytic={gflat[i]:.8g} fd={fd:.8g}"
            )


def randt(rng, *shape, requires_grad=True, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=np.float64)
