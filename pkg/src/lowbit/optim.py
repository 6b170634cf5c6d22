"""SGD-with-momentum and Adam over latent full-precision master weights.

Updates always apply to the master copies; quantization is re-derived from
them at the next forward pass. Weight decay is the coupled L2 form (added to
the gradient before the momentum/moment updates).
"""

from __future__ import annotations

import numpy as np

from .errors import OptimizerStateError


class Optimizer:
    kind = "base"

    def __init__(self, params, lr, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grad(self, p):
        if p.grad is None:
            raise OptimizerStateError("optimizer step with a missing gradient")
        if p.grad.shape != p.data.shape:
            raise OptimizerStateError(
                f"gradient shape {p.grad.shape} does not match parameter {p.data.shape}")
        g = p.grad
        if self.weight_decay != 0.0:
            g = g + self.weight_decay * p.data
        return g

    def state_arrays(self):
        """Ordered (slot_name, list-of-arrays aligned with params) pairs."""
        return []

    def load_state_arrays(self, slots):
        for name, arrays in self.state_arrays():
            loaded = slots[name]
            if len(loaded) != len(arrays):
                raise OptimizerStateError(f"optimizer slot {name}: buffer count mismatch")
            for dst, src in zip(arrays, loaded):
                if dst.shape != src.shape:
                    raise OptimizerStateError(f"optimizer slot {name}: shape mismatch")
                dst[...] = src


class SGDMomentum(Optimizer):
    kind = "sgd_momentum"

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            g = self._grad(p)
            v *= self.momentum
            v += g
            p.data -= self.lr * v
        self.step_count += 1

    def state_arrays(self):
        return [("velocity", self.velocity)]


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = self._grad(p)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        return [("adam_m", self.m), ("adam_v", self.v)]


def make_optimizer(kind, params, lr, momentum=0.9, weight_decay=0.0,
                   adam_betas=(0.9, 0.999), adam_eps=1e-8):
    if kind == "sgd_momentum":
        return SGDMomentum(params, lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, lr, betas=adam_betas, eps=adam_eps, weight_decay=weight_decay)
    raise OptimizerStateError(f"unknown optimizer kind: {kind}")
