"""Adaptive-moment optimizer over tape leaves."""

import numpy as np

from tdtmle.backend import kernels as K


class Adam:
    """Bias-corrected adaptive-moment updates (beta1=0.9, beta2=0.999,
    eps=1e-8).  A missing gradient is treated as zero, so parameters that
    received no gradient are left unchanged."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros(p.data.size) for p in self.params]
        self._v = [np.zeros(p.data.size) for p in self.params]

    def step(self):
        self.step_count += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            K.adam_step(
                p.data.ravel(), p.grad.ravel(), m, v,
                self.step_count, self.lr, self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None
