"""Adam with decoupled-from-nothing weight decay, plus the step schedule.

Weight decay is added straight onto the gradient (classic L2 regularization)
before the moment updates. Each network gets its own Adam instance; the
shared step counter `t` lives here so checkpoints can restore bias
correction exactly.
"""

from __future__ import annotations

import numpy as np


def lr_schedule(base_lr, step, decay=0.95, interval=20000):
    """Staircase decay: base * decay ** floor(step / interval)."""
    if base_lr <= 0:
        raise ValueError(f"base learning rate must be > 0, got {base_lr}")
    if not 0 < decay <= 1:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    if interval < 1:
        raise ValueError(f"decay interval must be >= 1, got {interval}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return base_lr * decay ** (step // interval)


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    beta1 defaults to 0.5, the usual GAN setting. step() consumes whatever
    is sitting in each Parameter.gradient; callers zero and refill those
    between steps.
    """

    def __init__(self, parameters, beta1=0.5, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.parameters = list(parameters)
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique within one optimizer")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value.data) for p in self.parameters}
        self.v = {p.name: np.zeros_like(p.value.data) for p in self.parameters}

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.parameters:
            g = p.gradient.data
            if self.weight_decay:
                g = g + self.weight_decay * p.value.data
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value.data -= (lr * update).astype(p.value.data.dtype, copy=False)

    def state_arrays(self):
        """name -> array for checkpointing; moments keyed per parameter."""
        out = {}
        for p in self.parameters:
            out[f"{p.name}/adam_m"] = self.m[p.name]
            out[f"{p.name}/adam_v"] = self.v[p.name]
        return out

    def load_state_array(self, name, array):
        base, _, kind = name.rpartition("/")
        table = self.m if kind == "adam_m" else self.v if kind == "adam_v" else None
        if table is None or base not in table:
            raise KeyError(f"unknown optimizer state entry {name!r}")
        if table[base].shape != array.shape:
            raise ValueError(
                f"optimizer state {name!r} has shape {array.shape}, expected "
                f"{table[base].shape}"
            )
        table[base][...] = array
