"""Primitive tensor operations with registered backward rules.

Heavy elementwise / normalization kernels are dispatched through
``tdtmle.backend`` (compiled extension or numpy fallback); structural ops
(matmul, reshape, concat, indexing, reductions) stay in numpy, where BLAS
and views are already optimal.
"""

import logging

import numpy as np

from tdtmle.backend import kernels as K
from tdtmle.autodiff.tensor import ShapeError, Tensor, accumulate, active_tape

log = logging.getLogger(__name__)

# Clamp applied to probabilities before log / logit.
EPS_PROB = 1e-7

# Default variance floor for layer normalization.
EPS_LAYERNORM = 1e-5


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(name, a, b, fwd, bwd_a, bwd_b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from e
    out = Tensor(data, op=name)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):

        def backward_fn(g):
            if a.requires_grad:
                accumulate(a, _unbroadcast(bwd_a(g), a.shape))
            if b.requires_grad:
                accumulate(b, _unbroadcast(bwd_b(g), b.shape))

        tape.push(out, name, backward_fn)
    return out


def add(a, b):
    return _binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(
        "mul", a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data
    )


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c, op="scale")
    tape = active_tape()
    if tape is not None and x.requires_grad:
        tape.push(out, "scale", lambda g: accumulate(x, g * c))
    return out


def neg(x):
    return scale(x, -1.0)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        # single flattened GEMM; numpy would loop one GEMM per batch slice
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(
            a.shape[:-1] + (b.shape[-1],)
        )
    else:
        data = a.data @ b.data
    out = Tensor(data, op="matmul")
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):

        def backward_fn(g):
            if a.ndim > 2 and b.ndim == 2:
                g2 = g.reshape(-1, g.shape[-1])
                if a.requires_grad:
                    accumulate(a, (g2 @ b.data.T).reshape(a.shape))
                if b.requires_grad:
                    accumulate(b, a.data.reshape(-1, a.shape[-1]).T @ g2)
                return
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                accumulate(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                accumulate(b, _unbroadcast(gb, b.shape))

        tape.push(out, "matmul", backward_fn)
    return out


def linear(x, w, b):
    """Fused affine map x @ w + b over the last axis."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"linear: incompatible shapes x={x.shape}, w={w.shape}, b={b.shape}"
        )
    x2 = x.data.reshape(-1, x.shape[-1])
    out_shape = x.shape[:-1] + (w.shape[1],)
    data = x2 @ w.data
    data += b.data
    out = Tensor(data.reshape(out_shape), op="linear")
    tape = active_tape()
    if tape is not None and (x.requires_grad or w.requires_grad or b.requires_grad):

        def backward_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            if x.requires_grad:
                accumulate(x, (g2 @ w.data.T).reshape(x.shape))
            if w.requires_grad:
                accumulate(w, x2.T @ g2)
            if b.requires_grad:
                accumulate(b, g2.sum(axis=0))

        tape.push(out, "linear", backward_fn)
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        ) from e
    out = Tensor(data, op="concat")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        ax = axis if axis >= 0 else data.ndim + axis
        sizes = [t.shape[ax] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward_fn(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[ax] = slice(lo, hi)
                    accumulate(t, g[tuple(idx)])

        tape.push(out, "concat", backward_fn)
    return out


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    x = as_tensor(x)
    ax = axis if axis >= 0 else x.ndim + axis
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, start + length)
    out = Tensor(x.data[tuple(idx)], op="narrow")
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward_fn(g):
            gx = np.zeros_like(x.data)
            gx[tuple(idx)] = g
            accumulate(x, gx)

        tape.push(out, "narrow", backward_fn)
    return out


def index_select(x, axis, idx):
    """Gather along ``axis`` with an integer index array; scatter-adds on
    backward, so repeated indices are handled."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(np.take(x.data, idx, axis=axis), op="index_select")
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward_fn(g):
            gx = np.zeros_like(x.data)
            sel = (slice(None),) * (axis if axis >= 0 else x.ndim + axis) + (idx,)
            np.add.at(gx, sel, g)
            accumulate(x, gx)

        tape.push(out, "index_select", backward_fn)
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), op="reshape")
    tape = active_tape()
    if tape is not None and x.requires_grad:
        tape.push(out, "reshape", lambda g: accumulate(x, g.reshape(x.shape)))
    return out


def transpose(x, axes):
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes), op="transpose")
    tape = active_tape()
    if tape is not None and x.requires_grad:
        inv = np.argsort(axes)
        tape.push(out, "transpose", lambda g: accumulate(x, np.transpose(g, inv)))
    return out


def expand(x, shape):
    """Broadcast to ``shape``; backward sum-reduces over broadcast axes."""
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape), op="expand")
    tape = active_tape()
    if tape is not None and x.requires_grad:
        tape.push(out, "expand", lambda g: accumulate(x, _unbroadcast(g, x.shape)))
    return out


def _unary_kernel(name, x, fwd, bwd, save_out):
    x = as_tensor(x)
    # reshape: compiled kernels promote 0-d inputs to 1-d
    y = fwd(x.data).reshape(x.shape)
    out = Tensor(y, op=name)
    tape = active_tape()
    if tape is not None and x.requires_grad:
        saved = y if save_out else x.data
        tape.push(out, name, lambda g: accumulate(x, bwd(g, saved).reshape(x.shape)))
    return out


def sigmoid(x):
    return _unary_kernel("sigmoid", x, K.sigmoid_fwd, K.sigmoid_bwd, save_out=True)


def tanh(x):
    return _unary_kernel("tanh", x, K.tanh_fwd, K.tanh_bwd, save_out=True)


def gelu(x):
    x = as_tensor(x)
    y, cdf = K.gelu_fwd(x.data)
    out = Tensor(y.reshape(x.shape), op="gelu")
    tape = active_tape()
    if tape is not None and x.requires_grad:
        tape.push(
            out, "gelu", lambda g: accumulate(x, K.gelu_bwd(g, x.data, cdf).reshape(x.shape))
        )
    return out


def exp(x):
    return _unary_kernel("exp", x, np.exp, lambda g, y: g * y, save_out=True)


def log(x):
    return _unary_kernel("log", x, np.log, lambda g, xd: g / xd, save_out=False)


def softmax_masked(x, mask=None):
    """Softmax over the last axis with an optional additive mask.

    ``mask`` is a constant array broadcastable as (rows, cols) against the
    trailing two axes; entries of -inf receive exactly zero probability.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"softmax_masked needs ndim >= 2, got shape {x.shape}")
    if mask is not None:
        mask = constant(mask)
        if mask.shape != x.shape[-2:]:
            raise ShapeError(
                f"softmax_masked: mask shape {mask.shape} does not match trailing "
                f"dims of {x.shape}"
            )
    lead = x.shape[:-2]
    rows, cols = x.shape[-2:]
    x3 = np.ascontiguousarray(x.data.reshape(-1, rows, cols))
    p3 = K.softmax_masked_fwd(x3, mask)
    out = Tensor(p3.reshape(x.shape), op="softmax_masked")
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward_fn(g):
            g3 = np.ascontiguousarray(g.reshape(-1, rows, cols))
            accumulate(x, K.softmax_masked_bwd(g3, p3).reshape(x.shape))

        tape.push(out, "softmax_masked", backward_fn)
    return out


def layer_norm(x, gain, bias, eps=EPS_LAYERNORM):
    """Normalize the last axis to zero mean / unit variance, then apply a
    learnable elementwise affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2, mean, rstd = K.layernorm_fwd(x2, gain.data, bias.data, eps)
    out = Tensor(y2.reshape(x.shape), op="layer_norm")
    tape = active_tape()
    if tape is not None and (x.requires_grad or gain.requires_grad or bias.requires_grad):

        def backward_fn(g):
            g2 = np.ascontiguousarray(g.reshape(-1, d))
            gx, gg, gb = K.layernorm_bwd(g2, x2, gain.data, mean, rstd)
            if x.requires_grad:
                accumulate(x, gx.reshape(x.shape))
            if gain.requires_grad:
                accumulate(gain, gg)
            if bias.requires_grad:
                accumulate(bias, gb)

        tape.push(out, "layer_norm", backward_fn)
    return out


def dropout(x, p, rng, training):
    """Inverted dropout; identity when ``training`` is False or p == 0."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    # float32 uniforms: the mask only needs a threshold comparison
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep / (1.0 - p)
    out = Tensor(x.data * mask, op="dropout")
    tape = active_tape()
    if tape is not None and x.requires_grad:
        tape.push(out, "dropout", lambda g: accumulate(x, g * mask))
    return out


def bce(pred, target):
    """Elementwise binary cross-entropy.

    ``target`` is treated as a constant (gradients flow to ``pred`` only).
    Predictions outside [EPS_PROB, 1-EPS_PROB] are clamped and the event
    is logged.
    """
    pred = as_tensor(pred)
    target = constant(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction shape {pred.shape} != target shape {target.shape}")
    if target.size and (target.min() < 0.0 or target.max() > 1.0):
        raise ValueError("bce: targets must lie in [0, 1]")
    loss, n_clamped = K.bce_fwd(pred.data, target, EPS_PROB)
    loss = loss.reshape(pred.shape)
    if n_clamped:
        log.debug("bce clamped %d prediction(s) to [%.0e, 1-%.0e]", n_clamped, EPS_PROB, EPS_PROB)
    out = Tensor(loss, op="bce")
    tape = active_tape()
    if tape is not None and pred.requires_grad:
        tape.push(
            out,
            "bce",
            lambda g: accumulate(
                pred, K.bce_bwd(g, pred.data, target, EPS_PROB).reshape(pred.shape)
            ),
        )
    return out


def _reduce(name, x, axis, np_fn, grad_scale):
    x = as_tensor(x)
    out = Tensor(np_fn(x.data, axis=axis), op=name)
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward_fn(g):
            if axis is None:
                gx = np.broadcast_to(g, x.shape)
            else:
                gx = np.broadcast_to(np.expand_dims(g, axis), x.shape)
            accumulate(x, gx * grad_scale)

        tape.push(out, name, backward_fn)
    return out


def vsum(x, axis=None):
    return _reduce("sum", x, axis, np.sum, 1.0)


def vmean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return _reduce("mean", x, axis, np.mean, 1.0 / n)


def stop_gradient(x):
    """Pass the value through and block gradient flow."""
    x = as_tensor(x)
    return Tensor(x.data, op="stop_gradient")


Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__neg__ = lambda self: neg(self)
