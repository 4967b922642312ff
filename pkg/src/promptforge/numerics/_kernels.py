"""Row-wise hot kernels with a numba path and a pure-numpy fallback.

Set ``PROMPTFORGE_DISABLE_NUMBA=1`` to force the numpy implementations.
Every kernel takes and returns 2-D C-contiguous arrays (rows x features);
callers reshape around them.
"""

import math
import os

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def _numba_requested():
    flag = os.environ.get("PROMPTFORGE_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("1", "true", "yes", "on")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by PROMPTFORGE_DISABLE_NUMBA")
    from numba import njit

    USE_NUMBA = True
except ImportError:
    USE_NUMBA = False


# ---------------------------------------------------------------- numpy path


def layernorm_fwd_np(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layernorm_bwd_np(dy, xhat, rstd):
    n = xhat.shape[1]
    a = dy.mean(axis=1, keepdims=True)
    b = (dy * xhat).sum(axis=1, keepdims=True) / n
    return (dy - a - xhat * b) * rstd[:, None]


def softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def log_softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_bwd_np(out, dy):
    return dy - np.exp(out) * dy.sum(axis=1, keepdims=True)


def gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_bwd_np(x, dy):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def gamma_accept_np(x, u, d, c):
    """Marsaglia-Tsang acceptance for a batch of (normal, uniform) pairs.

    Returns (accepted mask, d*v values).
    """
    v = 1.0 + c * x
    pos = v > 0.0
    v3 = np.where(pos, v, 1.0) ** 3
    squeeze = u < 1.0 - 0.0331 * x**4
    with np.errstate(divide="ignore", invalid="ignore"):
        full = np.log(u) < 0.5 * x * x + d * (1.0 - v3 + np.log(v3))
    ok = pos & (squeeze | full)
    return ok, d * v3


# ---------------------------------------------------------------- numba path

if USE_NUMBA:

    @njit(cache=True)
    def layernorm_fwd_nb(x, eps):
        rows, n = x.shape
        out = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            s = 0.0
            for j in range(n):
                s += x[r, j]
            mu = s / n
            q = 0.0
            for j in range(n):
                t = x[r, j] - mu
                q += t * t
            rs = 1.0 / math.sqrt(q / n + eps)
            rstd[r] = rs
            for j in range(n):
                out[r, j] = (x[r, j] - mu) * rs
        return out, rstd

    @njit(cache=True)
    def layernorm_bwd_nb(dy, xhat, rstd):
        rows, n = dy.shape
        dx = np.empty_like(dy)
        for r in range(rows):
            a = 0.0
            b = 0.0
            for j in range(n):
                a += dy[r, j]
                b += dy[r, j] * xhat[r, j]
            a /= n
            b /= n
            for j in range(n):
                dx[r, j] = (dy[r, j] - a - xhat[r, j] * b) * rstd[r]
        return dx

    @njit(cache=True)
    def softmax_fwd_nb(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            for j in range(n):
                out[r, j] /= s
        return out

    @njit(cache=True)
    def softmax_bwd_nb(y, dy):
        rows, n = y.shape
        dx = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for j in range(n):
                s += dy[r, j] * y[r, j]
            for j in range(n):
                dx[r, j] = y[r, j] * (dy[r, j] - s)
        return dx

    @njit(cache=True)
    def log_softmax_fwd_nb(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                s += math.exp(x[r, j] - m)
            lse = math.log(s)
            for j in range(n):
                out[r, j] = x[r, j] - m - lse
        return out

    @njit(cache=True)
    def log_softmax_bwd_nb(out, dy):
        rows, n = out.shape
        dx = np.empty_like(out)
        for r in range(rows):
            s = 0.0
            for j in range(n):
                s += dy[r, j]
            for j in range(n):
                dx[r, j] = dy[r, j] - math.exp(out[r, j]) * s
        return dx

    @njit(cache=True)
    def gelu_fwd_nb(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                # tanh via exp: libm tanh is several times slower here
                z = _GELU_C * (v + 0.044715 * v * v * v)
                out[r, j] = v * (1.0 - 1.0 / (math.exp(2.0 * z) + 1.0))
        return out

    @njit(cache=True)
    def gelu_bwd_nb(x, dy):
        rows, n = x.shape
        dx = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                t = 1.0 - 2.0 / (math.exp(2.0 * _GELU_C * (v + 0.044715 * v * v * v)) + 1.0)
                dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
                dx[r, j] = dy[r, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return dx

    @njit(cache=True)
    def gamma_accept_nb(x, u, d, c):
        n = x.shape[0]
        ok = np.zeros(n, dtype=np.bool_)
        val = np.empty(n, dtype=np.float64)
        for i in range(n):
            v = 1.0 + c * x[i]
            if v <= 0.0:
                val[i] = d
                continue
            v = v * v * v
            val[i] = d * v
            xi2 = x[i] * x[i]
            if u[i] < 1.0 - 0.0331 * xi2 * xi2:
                ok[i] = True
            elif u[i] > 0.0 and math.log(u[i]) < 0.5 * xi2 + d * (1.0 - v + math.log(v)):
                ok[i] = True
        return ok, val

    layernorm_fwd = layernorm_fwd_nb
    layernorm_bwd = layernorm_bwd_nb
    softmax_fwd = softmax_fwd_nb
    softmax_bwd = softmax_bwd_nb
    log_softmax_fwd = log_softmax_fwd_nb
    log_softmax_bwd = log_softmax_bwd_nb
    gelu_fwd = gelu_fwd_nb
    gelu_bwd = gelu_bwd_nb
    gamma_accept = gamma_accept_nb
else:
    layernorm_fwd = layernorm_fwd_np
    layernorm_bwd = layernorm_bwd_np
    softmax_fwd = softmax_fwd_np
    softmax_bwd = softmax_bwd_np
    log_softmax_fwd = log_softmax_fwd_np
    log_softmax_bwd = log_softmax_bwd_np
    gelu_fwd = gelu_fwd_np
    gelu_bwd = gelu_bwd_np
    gamma_accept = gamma_accept_np


def backend():
    return "numba" if USE_NUMBA else "numpy"
