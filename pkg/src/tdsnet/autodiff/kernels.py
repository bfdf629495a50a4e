"""Hot element-wise / windowed kernels with two interchangeable backends.

The ``numba`` backend compiles explicit loops with ``@njit``; the ``numpy``
backend is a vectorised reference.  Select with the ``TDS_BACKEND``
environment variable (``numba`` or ``numpy``) or :func:`set_backend`.  When
numba is not importable the numpy path is used regardless.

All kernels take and return contiguous float64 arrays of a fixed rank so that
each numba function compiles exactly once.
"""
import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BACKENDS = ("numba", "numpy")


def _initial_backend():
    name = os.environ.get("TDS_BACKEND", "numba").strip().lower()
    if name not in BACKENDS:
        raise ValueError(f"TDS_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Switch kernel backend at runtime; returns the previous one."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not available")
    prev, _backend = _backend, name
    return prev


# ----------------------------------------------------------------------------
# numpy reference implementations
# ----------------------------------------------------------------------------

def _layer_norm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd


def _layer_norm_bwd_np(g, xhat, rstd, gamma):
    gx_hat = g * gamma
    c = xhat.shape[1]
    m1 = gx_hat.sum(axis=1, keepdims=True) / c
    m2 = (gx_hat * xhat).sum(axis=1, keepdims=True) / c
    gx = rstd * (gx_hat - m1 - xhat * m2)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _gelu_fwd_np(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT_HALF))


def _gelu_bwd_np(g, x):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def _softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _maxpool_fwd_np(x, kt, kh, kw):
    m, t, h, w = x.shape
    rt, rh, rw = kt // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (rt, rt), (rh, rh), (rw, rw)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    win = win.reshape(m, t, h, w, kt * kh * kw)
    # argmax returns the first maximum: earliest window offset -> lowest source index
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    a, b, c = np.unravel_index(arg, (kt, kh, kw))
    tt = np.clip(np.arange(t)[None, :, None, None] + a - rt, 0, t - 1)
    hh = np.clip(np.arange(h)[None, None, :, None] + b - rh, 0, h - 1)
    ww = np.clip(np.arange(w)[None, None, None, :] + c - rw, 0, w - 1)
    idx = (tt * h + hh) * w + ww
    return np.ascontiguousarray(out), idx.astype(np.int64)


def _maxpool_bwd_np(g, idx, shape):
    m = shape[0]
    per = shape[1] * shape[2] * shape[3]
    flat = (idx.reshape(m, -1) + (np.arange(m) * per)[:, None]).ravel()
    gx = np.bincount(flat, weights=g.ravel(), minlength=m * per)
    return gx.reshape(shape)


# ----------------------------------------------------------------------------
# numba implementations
# ----------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _layer_norm_fwd_nb(x, gamma, beta, eps):
        m, c = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty((m, 1))
        for i in range(m):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= c
            r = 1.0 / math.sqrt(var + eps)
            rstd[i, 0] = r
            for j in range(c):
                xh = (x[i, j] - mu) * r
                xhat[i, j] = xh
                out[i, j] = xh * gamma[j] + beta[j]
        return out, xhat, rstd

    @njit(cache=True)
    def _layer_norm_bwd_nb(g, xhat, rstd, gamma):
        m, c = g.shape
        gx = np.empty_like(g)
        gg = np.zeros(c)
        gb = np.zeros(c)
        for i in range(m):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                gh = g[i, j] * gamma[j]
                m1 += gh
                m2 += gh * xhat[i, j]
                gg[j] += g[i, j] * xhat[i, j]
                gb[j] += g[i, j]
            m1 /= c
            m2 /= c
            r = rstd[i, 0]
            for j in range(c):
                gx[i, j] = r * (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
        return gx, gg, gb

    @njit(cache=True)
    def _gelu_fwd_nb(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT_HALF))
        return out

    @njit(cache=True)
    def _gelu_bwd_nb(g, x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            cdf = 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
            out[i] = g[i] * (cdf + v * pdf)
        return out

    @njit(cache=True)
    def _softmax_fwd_nb(x):
        m, c = x.shape
        out = np.empty_like(x)
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, c):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(c):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(c):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _softmax_bwd_nb(g, y):
        m, c = g.shape
        out = np.empty_like(g)
        for i in range(m):
            dot = 0.0
            for j in range(c):
                dot += g[i, j] * y[i, j]
            for j in range(c):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def _maxpool_fwd_nb(x, kt, kh, kw):
        m, t, h, w = x.shape
        rt, rh, rw = kt // 2, kh // 2, kw // 2
        out = np.empty_like(x)
        idx = np.empty(x.shape, dtype=np.int64)
        for n in range(m):
            for i in range(t):
                for j in range(h):
                    for k in range(w):
                        best = 0.0
                        bi = -1
                        for a in range(i - rt, i + rt + 1):
                            ta = min(max(a, 0), t - 1)
                            for b in range(j - rh, j + rh + 1):
                                hb = min(max(b, 0), h - 1)
                                for c in range(k - rw, k + rw + 1):
                                    wc = min(max(c, 0), w - 1)
                                    v = x[n, ta, hb, wc]
                                    if bi < 0 or v > best:
                                        best = v
                                        bi = (ta * h + hb) * w + wc
                        out[n, i, j, k] = best
                        idx[n, i, j, k] = bi
        return out, idx

    @njit(cache=True)
    def _maxpool_bwd_nb(g, idx, m, t, h, w):
        gx = np.zeros((m, t * h * w))
        gf = g.reshape(m, t * h * w)
        idf = idx.reshape(m, t * h * w)
        for n in range(m):
            for p in range(t * h * w):
                gx[n, idf[n, p]] += gf[n, p]
        return gx.reshape(m, t, h, w)


# ----------------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------------

def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def layer_norm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm of ``x`` [M, C]; returns (out, xhat, rstd[M, 1])."""
    if _backend == "numba":
        return _layer_norm_fwd_nb(_c(x), _c(gamma), _c(beta), float(eps))
    return _layer_norm_fwd_np(x, gamma, beta, eps)


def layer_norm_bwd(g, xhat, rstd, gamma):
    if _backend == "numba":
        return _layer_norm_bwd_nb(_c(g), xhat, rstd, _c(gamma))
    return _layer_norm_bwd_np(g, xhat, rstd, gamma)


def gelu_fwd(x):
    if _backend == "numba":
        return _gelu_fwd_nb(_c(x).ravel()).reshape(x.shape)
    return _gelu_fwd_np(x)


def gelu_bwd(g, x):
    if _backend == "numba":
        return _gelu_bwd_nb(_c(g).ravel(), _c(x).ravel()).reshape(x.shape)
    return _gelu_bwd_np(g, x)


def softmax_fwd(x):
    if _backend == "numba":
        return _softmax_fwd_nb(_c(x))
    return _softmax_fwd_np(x)


def softmax_bwd(g, y):
    if _backend == "numba":
        return _softmax_bwd_nb(_c(g), y)
    return _softmax_bwd_np(g, y)


def maxpool_fwd(x, kt, kh, kw):
    """Stride-1 same-size max pool of ``x`` [M, T, H, W], replicate padding.

    Returns the pooled values and, per output element, the linear index
    (within the [T, H, W] block) of the source element that won.  Ties go to
    the lowest linear index.
    """
    if _backend == "numba":
        return _maxpool_fwd_nb(_c(x), kt, kh, kw)
    return _maxpool_fwd_np(x, kt, kh, kw)


def maxpool_bwd(g, idx, shape):
    if _backend == "numba":
        m, t, h, w = shape
        return _maxpool_bwd_nb(_c(g), idx, m, t, h, w)
    return _maxpool_bwd_np(g, idx, shape)
