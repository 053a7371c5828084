"""Adam and RAdam with decoupled per-epoch weight decay.

Frozen parameters are skipped entirely: no moment update, no decay, so they
stay bitwise unchanged.
"""

import math

import numpy as np

from . import kernels
from .errors import MissingGradientError

KINDS = ("adam", "radam")


class Optimizer:
    def __init__(self, params, kind="adam", lr=1.3e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay_per_epoch=1e-5, radam_threshold=5.0):
        if kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}; expected one of {KINDS}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay_per_epoch = weight_decay_per_epoch
        self.radam_threshold = radam_threshold
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def reset_state(self):
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _step_size(self, t):
        """Scalar multiplier on m_hat and whether the second moment is used."""
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** t
        if self.kind == "adam":
            return self.lr / bc1, True
        rho_inf = 2.0 / (1 - b2) - 1
        rho_t = rho_inf - 2.0 * t * b2 ** t / (1 - b2 ** t)
        if rho_t <= self.radam_threshold:
            # variance of the adaptive rate is intractable early on: plain momentum
            return self.lr / bc1, False
        r = math.sqrt(
            (rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t)
        )
        return self.lr * r / bc1, True

    def step(self, steps_per_epoch=1, skip_groups=()):
        """One update. Parameters in ``skip_groups`` (no gradient this step) are left untouched."""
        skip = set(skip_groups)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        scale, adaptive = self._step_size(t)
        bc2 = 1 - b2 ** t
        decay = self.weight_decay_per_epoch / max(steps_per_epoch, 1)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen or p.group in skip:
                continue
            g = p.grad
            if g is None:
                raise MissingGradientError(f"no gradient for trainable parameter {p.name}")
            kernels.adam_update(p.data, g, m, v, b1, b2, 1 - decay, scale, bc2, self.eps,
                                adaptive)

    def state_dict(self):
        return {
            "kind": self.kind,
            "step": self.step_count,
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay_per_epoch": self.weight_decay_per_epoch,
        }
