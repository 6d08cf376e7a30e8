"""Hot numeric kernels: row-wise softmax, layer norm, and cross entropy.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin that
fuses the row loops.  The numba path is the default; setting the environment
variable ``STABFORGE_NO_NUMBA`` (to any non-empty value) before import selects
the numpy path, as does a missing numba installation.  Both variants stay
importable (``numpy_impl`` / ``numba_impl``) so tests and the benchmark in
``benchmarks/bench_kernels.py`` can compare them directly.

Matrix products are deliberately left to numpy/BLAS; only the elementwise and
reduction-heavy inner loops live here.
"""

import os
import types

import numpy as np


def _softmax_rows(x):
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def _softmax_rows_grad(y, gy):
    dot = np.sum(y * gy, axis=1, keepdims=True)
    return y * (gy - dot)


def _layer_norm_rows(x, gain, bias, eps):
    mu = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def _layer_norm_rows_grad(xhat, inv_std, gain, gy):
    gxhat = gy * gain
    m1 = np.mean(gxhat, axis=1, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=1, keepdims=True)
    gx = inv_std[:, None] * (gxhat - m1 - xhat * m2)
    ggain = np.sum(gy * xhat, axis=0)
    gbias = np.sum(gy, axis=0)
    return gx, ggain, gbias


def _cross_entropy_rows(logits, targets):
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=1, keepdims=True)
    probs = e / z
    lse = m[:, 0] + np.log(z[:, 0])
    losses = lse - logits[np.arange(logits.shape[0]), targets]
    return losses, probs


numpy_impl = types.SimpleNamespace(
    softmax_rows=_softmax_rows,
    softmax_rows_grad=_softmax_rows_grad,
    layer_norm_rows=_layer_norm_rows,
    layer_norm_rows_grad=_layer_norm_rows_grad,
    cross_entropy_rows=_cross_entropy_rows,
)

numba_impl = None

if not os.environ.get("STABFORGE_NO_NUMBA"):
    try:
        from numba import njit
    except ImportError:
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _nb_softmax_rows(x):
        n, d = x.shape
        y = np.empty((n, d))
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                v = np.exp(x[i, j] - m)
                y[i, j] = v
                s += v
            for j in range(d):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def _nb_softmax_rows_grad(y, gy):
        n, d = y.shape
        gx = np.empty((n, d))
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += y[i, j] * gy[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)
        return gx

    @njit(cache=True)
    def _nb_layer_norm_rows(x, gain, bias, eps):
        n, d = x.shape
        out = np.empty((n, d))
        xhat = np.empty((n, d))
        inv_std = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                dv = x[i, j] - mu
                var += dv * dv
            var /= d
            istd = 1.0 / np.sqrt(var + eps)
            inv_std[i] = istd
            for j in range(d):
                h = (x[i, j] - mu) * istd
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, inv_std

    @njit(cache=True)
    def _nb_layer_norm_rows_grad(xhat, inv_std, gain, gy):
        n, d = xhat.shape
        gx = np.empty((n, d))
        ggain = np.zeros(d)
        gbias = np.zeros(d)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gh = gy[i, j] * gain[j]
                m1 += gh
                m2 += gh * xhat[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gh = gy[i, j] * gain[j]
                gx[i, j] = inv_std[i] * (gh - m1 - xhat[i, j] * m2)
                ggain[j] += gy[i, j] * xhat[i, j]
                gbias[j] += gy[i, j]
        return gx, ggain, gbias

    @njit(cache=True)
    def _nb_cross_entropy_rows(logits, targets):
        n, d = logits.shape
        probs = np.empty((n, d))
        losses = np.empty(n)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, d):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(d):
                v = np.exp(logits[i, j] - m)
                probs[i, j] = v
                s += v
            for j in range(d):
                probs[i, j] /= s
            losses[i] = m + np.log(s) - logits[i, targets[i]]
        return losses, probs

    numba_impl = types.SimpleNamespace(
        softmax_rows=_nb_softmax_rows,
        softmax_rows_grad=_nb_softmax_rows_grad,
        layer_norm_rows=_nb_layer_norm_rows,
        layer_norm_rows_grad=_nb_layer_norm_rows_grad,
        cross_entropy_rows=_nb_cross_entropy_rows,
    )

USE_NUMBA = numba_impl is not None
ACTIVE = "numba" if USE_NUMBA else "numpy"

_active = numba_impl if USE_NUMBA else numpy_impl

softmax_rows = _active.softmax_rows
softmax_rows_grad = _active.softmax_rows_grad
layer_norm_rows = _active.layer_norm_rows
layer_norm_rows_grad = _active.layer_norm_rows_grad
cross_entropy_rows = _active.cross_entropy_rows
