"""Row-wise numeric kernels (softmax, LayerNorm, exact GELU), forward and adjoint.

Two interchangeable implementations live here: numba ``@njit`` loops and a
pure-numpy fallback. The active one is picked at import time from the
``MHFORMER_KERNELS`` environment variable (``numba`` or ``numpy``); numba is
the default whenever it imports. ``set_backend`` switches at runtime.

All kernels take 2-D C-contiguous arrays; callers flatten leading axes.
"""

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAS_NUMBA = False

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


# --------------------------------------------------------------------------
# numpy fallback
# --------------------------------------------------------------------------

def _np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _np_layernorm_bwd(g, xhat, rstd, gain):
    d = xhat.shape[1]
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    gx_hat = g * gain
    a = gx_hat.sum(axis=1, keepdims=True)
    b = (gx_hat * xhat).sum(axis=1, keepdims=True)
    gx = (gx_hat - a / d - xhat * (b / d)) * rstd[:, None]
    return gx, ggain, gbias


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def _np_gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return g * (cdf + x * pdf)


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _nb_softmax_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(d):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def _nb_softmax_bwd(y, g):
        n, d = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def _nb_layernorm_fwd(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @njit(cache=True)
    def _nb_layernorm_bwd(g, xhat, rstd, gain):
        n, d = g.shape
        gx = np.empty_like(g)
        ggain = np.zeros(d, dtype=g.dtype)
        gbias = np.zeros(d, dtype=g.dtype)
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(d):
                gh = g[i, j] * gain[j]
                a += gh
                b += gh * xhat[i, j]
                ggain[j] += g[i, j] * xhat[i, j]
                gbias[j] += g[i, j]
            a /= d
            b /= d
            for j in range(d):
                gx[i, j] = (g[i, j] * gain[j] - a - xhat[i, j] * b) * rstd[i]
        return gx, ggain, gbias

    @njit(cache=True)
    def _nb_gelu_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return out

    @njit(cache=True)
    def _nb_gelu_bwd(x, g):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
                pdf = math.exp(-0.5 * v * v) * _INV_SQRT2PI
                out[i, j] = g[i, j] * (cdf + v * pdf)
        return out


_BACKENDS = {
    "numpy": {
        "softmax_fwd": _np_softmax_fwd,
        "softmax_bwd": _np_softmax_bwd,
        "layernorm_fwd": _np_layernorm_fwd,
        "layernorm_bwd": _np_layernorm_bwd,
        "gelu_fwd": _np_gelu_fwd,
        "gelu_bwd": _np_gelu_bwd,
    }
}
if HAS_NUMBA:
    _BACKENDS["numba"] = {
        "softmax_fwd": _nb_softmax_fwd,
        "softmax_bwd": _nb_softmax_bwd,
        "layernorm_fwd": _nb_layernorm_fwd,
        "layernorm_bwd": _nb_layernorm_bwd,
        "gelu_fwd": _nb_gelu_fwd,
        "gelu_bwd": _nb_gelu_bwd,
    }

_active = {}
_active_name = ""


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for all subsequent ops."""
    global _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}")
    _active.clear()
    _active.update(_BACKENDS[name])
    _active_name = name


def backend():
    return _active_name


def available_backends():
    return sorted(_BACKENDS)


set_backend(os.environ.get("MHFORMER_KERNELS", "numba" if HAS_NUMBA else "numpy"))


def _c2d(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_fwd(x):
    return _active["softmax_fwd"](_c2d(x)).reshape(x.shape)


def softmax_bwd(y, g):
    return _active["softmax_bwd"](_c2d(y), _c2d(g)).reshape(y.shape)


def layernorm_fwd(x, gain, bias, eps):
    y, xhat, rstd = _active["layernorm_fwd"](
        _c2d(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), x.dtype.type(eps)
    )
    return y.reshape(x.shape), xhat, rstd


def layernorm_bwd(g, xhat, rstd, gain):
    gx, ggain, gbias = _active["layernorm_bwd"](_c2d(g), xhat, rstd, np.ascontiguousarray(gain))
    return gx.reshape(g.shape), ggain, gbias


def gelu_fwd(x):
    return _active["gelu_fwd"](_c2d(x)).reshape(x.shape)


def gelu_bwd(x, g):
    return _active["gelu_bwd"](_c2d(x), _c2d(g)).reshape(x.shape)
