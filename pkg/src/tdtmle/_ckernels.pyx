# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels. Mirrors the API of ``_kernels_np``; see that module
for the shape contracts."""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, fabs, log, log1p, pow, sqrt, tanh, INFINITY

cnp.import_array()

NAME = "compiled"

cdef double _INV_SQRT2 = 0.7071067811865476
cdef double _INV_SQRT2PI = 0.3989422804014327


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        e = exp(-x)
        return 1.0 / (1.0 + e)
    e = exp(x)
    return e / (1.0 + e)


def sigmoid_fwd(object x):
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(xa)
    cdef const double[::1] xv = xa.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = _sigmoid(xv[i])
    return out


def sigmoid_bwd(object gy, object y):
    cdef cnp.ndarray ga = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray ya = np.ascontiguousarray(y, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(ga)
    cdef const double[::1] gv = ga.ravel()
    cdef const double[::1] yv = ya.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = gv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out


def tanh_fwd(object x):
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(xa)
    cdef const double[::1] xv = xa.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = tanh(xv[i])
    return out


def tanh_bwd(object gy, object y):
    cdef cnp.ndarray ga = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray ya = np.ascontiguousarray(y, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(ga)
    cdef const double[::1] gv = ga.ravel()
    cdef const double[::1] yv = ya.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = gv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] * (1.0 - yv[i] * yv[i])
    return out


def gelu_fwd(object x):
    """Returns (y, cdf); the Gaussian cdf is saved so backward does not
    recompute erf."""
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(xa)
    cdef cnp.ndarray cdf = np.empty_like(xa)
    cdef const double[::1] xv = xa.ravel()
    cdef double[::1] ov = out.ravel()
    cdef double[::1] cv = cdf.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            cv[i] = 0.5 * (1.0 + erf(xv[i] * _INV_SQRT2))
            ov[i] = xv[i] * cv[i]
    return out, cdf


def gelu_bwd(object gy, object x, object cdf):
    cdef cnp.ndarray ga = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray ca = np.ascontiguousarray(cdf, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(ga)
    cdef const double[::1] gv = ga.ravel()
    cdef const double[::1] xv = xa.ravel()
    cdef const double[::1] cv = ca.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = gv.shape[0]
    cdef double pdf
    with nogil:
        for i in range(n):
            pdf = _INV_SQRT2PI * exp(-0.5 * xv[i] * xv[i])
            ov[i] = gv[i] * (cv[i] + xv[i] * pdf)
    return out


def softmax_masked_fwd(object x, object mask):
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(xa)
    cdef const double[:, :, ::1] xv = xa
    cdef double[:, :, ::1] ov = out
    cdef const double[:, ::1] mv
    cdef bint has_mask = mask is not None
    if has_mask:
        mv = np.ascontiguousarray(mask, dtype=np.float64)
    else:
        mv = np.zeros((1, 1))
    cdef Py_ssize_t b, r, c
    cdef Py_ssize_t nb = xv.shape[0], nr = xv.shape[1], nc = xv.shape[2]
    cdef double m, s, v
    with nogil:
        for b in range(nb):
            for r in range(nr):
                m = -INFINITY
                for c in range(nc):
                    v = xv[b, r, c]
                    if has_mask:
                        v += mv[r, c]
                    if v > m:
                        m = v
                if m == -INFINITY:
                    for c in range(nc):
                        ov[b, r, c] = 0.0
                    continue
                s = 0.0
                for c in range(nc):
                    v = xv[b, r, c]
                    if has_mask:
                        v += mv[r, c]
                    if v == -INFINITY:
                        ov[b, r, c] = 0.0
                    else:
                        ov[b, r, c] = exp(v - m)
                        s += ov[b, r, c]
                for c in range(nc):
                    ov[b, r, c] /= s
    return out


def softmax_masked_bwd(object gy, object p):
    cdef cnp.ndarray ga = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray pa = np.ascontiguousarray(p, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(ga)
    cdef const double[:, :, ::1] gv = ga
    cdef const double[:, :, ::1] pv = pa
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, r, c
    cdef Py_ssize_t nb = gv.shape[0], nr = gv.shape[1], nc = gv.shape[2]
    cdef double dot
    with nogil:
        for b in range(nb):
            for r in range(nr):
                dot = 0.0
                for c in range(nc):
                    dot += gv[b, r, c] * pv[b, r, c]
                for c in range(nc):
                    ov[b, r, c] = pv[b, r, c] * (gv[b, r, c] - dot)
    return out


def layernorm_fwd(object x, object gain, object bias, double eps):
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t nr = xa.shape[0], nd = xa.shape[1]
    cdef cnp.ndarray y = np.empty_like(xa)
    cdef cnp.ndarray mean = np.empty(nr, dtype=np.float64)
    cdef cnp.ndarray rstd = np.empty(nr, dtype=np.float64)
    cdef const double[:, ::1] xv = xa
    cdef double[:, ::1] yv = y
    cdef double[::1] mv = mean
    cdef double[::1] rv = rstd
    cdef const double[::1] gv = np.ascontiguousarray(gain, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t r, d
    cdef double mu, var, xc
    with nogil:
        for r in range(nr):
            mu = 0.0
            for d in range(nd):
                mu += xv[r, d]
            mu /= nd
            var = 0.0
            for d in range(nd):
                xc = xv[r, d] - mu
                var += xc * xc
            var /= nd
            mv[r] = mu
            rv[r] = 1.0 / sqrt(var + eps)
            for d in range(nd):
                yv[r, d] = (xv[r, d] - mu) * rv[r] * gv[d] + bv[d]
    return y, mean, rstd


def layernorm_bwd(object gy, object x, object gain, object mean, object rstd):
    cdef cnp.ndarray ga = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t nr = xa.shape[0], nd = xa.shape[1]
    cdef cnp.ndarray gx = np.empty_like(xa)
    cdef cnp.ndarray gg = np.zeros(nd, dtype=np.float64)
    cdef cnp.ndarray gb = np.zeros(nd, dtype=np.float64)
    cdef const double[:, ::1] gv = ga
    cdef const double[:, ::1] xv = xa
    cdef double[:, ::1] gxv = gx
    cdef double[::1] ggv = gg
    cdef double[::1] gbv = gb
    cdef const double[::1] gnv = np.ascontiguousarray(gain, dtype=np.float64)
    cdef const double[::1] mv = np.ascontiguousarray(mean, dtype=np.float64)
    cdef const double[::1] rv = np.ascontiguousarray(rstd, dtype=np.float64)
    cdef Py_ssize_t r, d
    cdef double xhat, dxhat, m1, m2
    with nogil:
        for r in range(nr):
            m1 = 0.0
            m2 = 0.0
            for d in range(nd):
                xhat = (xv[r, d] - mv[r]) * rv[r]
                dxhat = gv[r, d] * gnv[d]
                m1 += dxhat
                m2 += dxhat * xhat
                ggv[d] += gv[r, d] * xhat
                gbv[d] += gv[r, d]
            m1 /= nd
            m2 /= nd
            for d in range(nd):
                xhat = (xv[r, d] - mv[r]) * rv[r]
                dxhat = gv[r, d] * gnv[d]
                gxv[r, d] = rv[r] * (dxhat - m1 - xhat * m2)
    return gx, gg, gb


def bce_fwd(object p, object t, double eps):
    cdef cnp.ndarray pa = np.ascontiguousarray(p, dtype=np.float64)
    cdef cnp.ndarray ta = np.ascontiguousarray(t, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(pa)
    cdef const double[::1] pv = pa.ravel()
    cdef const double[::1] tv = ta.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef long n_clamped = 0
    cdef double pc
    with nogil:
        for i in range(n):
            pc = pv[i]
            if pc < eps:
                pc = eps
                n_clamped += 1
            elif pc > 1.0 - eps:
                pc = 1.0 - eps
                n_clamped += 1
            ov[i] = -(tv[i] * log(pc) + (1.0 - tv[i]) * log1p(-pc))
    return out, n_clamped


def bce_bwd(object gy, object p, object t, double eps):
    cdef cnp.ndarray ga = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray pa = np.ascontiguousarray(p, dtype=np.float64)
    cdef cnp.ndarray ta = np.ascontiguousarray(t, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(ga)
    cdef const double[::1] gv = ga.ravel()
    cdef const double[::1] pv = pa.ravel()
    cdef const double[::1] tv = ta.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = gv.shape[0]
    cdef double pc
    with nogil:
        for i in range(n):
            pc = pv[i]
            if pc < eps:
                pc = eps
            elif pc > 1.0 - eps:
                pc = 1.0 - eps
            ov[i] = gv[i] * (pc - tv[i]) / (pc * (1.0 - pc))
    return out


def adam_step(object param, object grad, object m, object v, long step,
              double lr, double beta1, double beta2, double eps):
    cdef double[::1] pv = param
    cdef const double[::1] gv = np.ascontiguousarray(grad, dtype=np.float64)
    cdef double[::1] mv = m
    cdef double[::1] vv = v
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double c1 = 1.0 - pow(beta1, step)
    cdef double c2 = 1.0 - pow(beta2, step)
    cdef double mhat, vhat
    with nogil:
        for i in range(n):
            mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i]
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i]
            mhat = mv[i] / c1
            vhat = vv[i] / c2
            pv[i] -= lr * mhat / (sqrt(vhat) + eps)
