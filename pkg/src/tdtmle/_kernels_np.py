"""Pure-numpy implementations of the hot numerical kernels.

This module and the compiled extension ``_ckernels`` expose the same
functions; ``tdtmle.backend`` picks one at import time.  All arrays are
C-contiguous float64.  Shapes are fixed by the callers in ``autodiff.ops``:

* elementwise kernels take arbitrary-shape arrays,
* ``softmax_masked_*`` take scores reshaped to (batch, rows, cols) with an
  optional additive (rows, cols) mask,
* ``layernorm_*`` take inputs reshaped to (rows, dim).
"""

import numpy as np
from scipy.special import erf

NAME = "numpy"

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def sigmoid_fwd(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_bwd(gy, y):
    return gy * y * (1.0 - y)


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(gy, y):
    return gy * (1.0 - y * y)


def gelu_fwd(x):
    """Returns (y, cdf); the Gaussian cdf is saved so backward does not
    recompute erf."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf


def gelu_bwd(gy, x, cdf):
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def softmax_masked_fwd(x, mask):
    """Row-wise softmax over the last axis of (B, R, C) scores.

    ``mask`` is an additive (R, C) array (0 for kept entries, -inf for
    masked ones) or None.  Masked entries get exactly zero probability; a
    fully masked row yields an all-zero row rather than NaN.
    """
    if mask is not None:
        x = x + mask[None, :, :]
    m = np.max(x, axis=-1, keepdims=True)
    finite = np.isfinite(m)
    p = np.exp(np.where(finite, x - m, -np.inf))
    s = np.sum(p, axis=-1, keepdims=True)
    np.divide(p, s, out=p, where=s > 0)
    p[~np.broadcast_to(finite, p.shape)] = 0.0
    return p


def softmax_masked_bwd(gy, p):
    dot = np.sum(gy * p, axis=-1, keepdims=True)
    return p * (gy - dot)


def layernorm_fwd(x, gain, bias, eps):
    """Normalize rows of (R, D) to zero mean / unit variance, then affine."""
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gain[None, :] + bias[None, :]
    return y, mean, rstd


def layernorm_bwd(gy, x, gain, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gb = gy.sum(axis=0)
    gg = (gy * xhat).sum(axis=0)
    dxhat = gy * gain[None, :]
    d = x.shape[1]
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return gx, gg, gb


def bce_fwd(p, t, eps):
    """Elementwise binary cross-entropy with predictions clamped to
    [eps, 1-eps].  Returns (loss, n_clamped)."""
    n_clamped = int(np.sum((p < eps) | (p > 1.0 - eps)))
    pc = np.clip(p, eps, 1.0 - eps)
    return -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)), n_clamped


def bce_bwd(gy, p, t, eps):
    pc = np.clip(p, eps, 1.0 - eps)
    return gy * (pc - t) / (pc * (1.0 - pc))


def adam_step(param, grad, m, v, step, lr, beta1, beta2, eps):
    """In-place bias-corrected adaptive-moment update on flat views."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
