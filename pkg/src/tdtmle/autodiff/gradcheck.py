"""Finite-difference verification of tape gradients."""

import math

import numpy as np

from tdtmle.autodiff.tensor import Tape, backward


def check_gradient(f, params, perturbation=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor loss and
    closing over ``params``; it must be deterministic across calls (freeze
    any dropout and bootstrapped targets before checking).  The error for
    each coordinate is |autodiff - fd| / max(1, |autodiff|).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss, params=params)
    grads = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.ravel()
        gflat = np.asarray(g).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            up = float(f().data)
            flat[i] = orig - perturbation
            down = float(f().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(
                    f"loss not finite at perturbed point (coordinate {i})"
                )
            fd = (up - down) / (2.0 * perturbation)
            rel = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            if rel > worst:
                worst = rel
    return worst
