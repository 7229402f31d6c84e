"""Finite-difference verification of recorded gradients.

Central differences in float64 against one analytic backward pass. The
callable under test must be deterministic: anything stochastic has to fix
its own randomness before coming here.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, backward


def grad_check(fn, inputs, eps=1e-5):
    """Max relative error between analytic and numeric gradients.

    fn takes len(inputs) Tensors and returns a scalar Tensor. Each input is
    a float64 array; every element is wiggled by +/-eps. Relative error per
    element is |a - f| / max(|a|, |f|, 1e-8); the max over all inputs comes
    back.
    """
    arrays = []
    for i, a in enumerate(inputs):
        a = np.asarray(a)
        if a.dtype != np.float64:
            raise ValueError(f"grad_check input {i} must be float64, got {a.dtype}")
        arrays.append(a.copy())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    if loss.data.size != 1:
        raise ValueError(f"fn must return a scalar, got shape {loss.data.shape}")
    grads = backward(tape, loss)
    analytic = [grads.get(t) for t in tensors]

    def value_at(arrays):
        out = fn(*[Tensor(a) for a in arrays])  # no tape: pure forward
        return float(out.data)

    worst = 0.0
    for k, base in enumerate(arrays):
        ga = analytic[k]
        if ga is None:
            ga = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = np.asarray(ga, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = value_at(arrays)
            flat[i] = saved - eps
            lo = value_at(arrays)
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            err = abs(gflat[i] - numeric) / denom
            if err > worst:
                worst = err
    return worst
