"""Hot numeric kernels: numba-jitted implementations with pure-numpy fallbacks.

The backend is selected once at import from the STTM_BACKEND environment
variable ("numba" or "numpy"; default numba when importable) and can be
switched at runtime with `set_backend`, which tests and the kernel benchmark
use to compare both paths. Both backends implement the same contracts; the
jitted path only changes constant factors, never semantics.

Kernels here are the inner loops that dominate training time: GELU and
LayerNorm forward/backward, row softmax forward/backward, and the fused AdamW
parameter update. Matrix products stay in numpy (BLAS).
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    import numba as _nb

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None
    _HAS_NUMBA = False

__all__ = [
    "active_backend",
    "available_backends",
    "set_backend",
    "gelu_fwd",
    "gelu_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "adamw_update",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _np_gelu_fwd(x):
    return (0.5 * x * (1.0 + _erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def _np_gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (g * (cdf + x * pdf)).astype(x.dtype, copy=False)


def _np_layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), xhat.astype(x.dtype, copy=False), rstd[:, 0].astype(x.dtype, copy=False)


def _np_layernorm_bwd(xhat, gamma, rstd, g):
    dxhat = g * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    return dx.astype(xhat.dtype, copy=False), dgamma, dbeta


def _np_softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def _np_softmax_bwd(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return (y * (g - dot)).astype(y.dtype, copy=False)


def _np_adamw_update(p, g, m, v, t, lr, b1, b2, eps, wd):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    if wd != 0.0:
        p *= 1.0 - lr * wd
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAS_NUMBA:

    @_nb.njit(cache=True)
    def _nb_gelu_fwd(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            xi = flat_x[i]
            flat_o[i] = 0.5 * xi * (1.0 + math.erf(xi * _INV_SQRT2))
        return out

    @_nb.njit(cache=True)
    def _nb_gelu_bwd(x, g):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_g = g.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            xi = flat_x[i]
            cdf = 0.5 * (1.0 + math.erf(xi * _INV_SQRT2))
            pdf = math.exp(-0.5 * xi * xi) * _INV_SQRT2PI
            flat_o[i] = flat_g[i] * (cdf + xi * pdf)
        return out

    @_nb.njit(cache=True)
    def _nb_layernorm_fwd(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mean = s / d
            sq = 0.0
            for j in range(d):
                diff = x[i, j] - mean
                sq += diff * diff
            r = 1.0 / math.sqrt(sq / d + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @_nb.njit(cache=True)
    def _nb_layernorm_bwd(xhat, gamma, rstd, g):
        n, d = xhat.shape
        dx = np.empty_like(xhat)
        dgamma = np.zeros(d, dtype=xhat.dtype)
        dbeta = np.zeros(d, dtype=xhat.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dh = g[i, j] * gamma[j]
                m1 += dh
                m2 += dh * xhat[i, j]
            m1 /= d
            m2 /= d
            r = rstd[i]
            for j in range(d):
                dh = g[i, j] * gamma[j]
                dx[i, j] = r * (dh - m1 - xhat[i, j] * m2)
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
        return dx, dgamma, dbeta

    @_nb.njit(cache=True)
    def _nb_softmax_fwd(x):
        n, d = x.shape
        y = np.empty_like(x)
        for i in range(n):
            hi = x[i, 0]
            for j in range(1, d):
                if x[i, j] > hi:
                    hi = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - hi)
                y[i, j] = e
                s += e
            for j in range(d):
                y[i, j] /= s
        return y

    @_nb.njit(cache=True)
    def _nb_softmax_bwd(y, g):
        n, d = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (g[i, j] - dot)
        return dx

    @_nb.njit(cache=True)
    def _nb_adamw_update(p, g, m, v, t, lr, b1, b2, eps, wd):
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        decay = 1.0 - lr * wd
        for i in range(p.size):
            gi = g[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
            if wd != 0.0:
                p[i] *= decay
            p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)


_BACKENDS = {"numpy"} | ({"numba"} if _HAS_NUMBA else set())
_backend = os.environ.get("STTM_BACKEND", "numba" if _HAS_NUMBA else "numpy")
if _backend not in _BACKENDS:
    raise ValueError(f"STTM_BACKEND must be one of {sorted(_BACKENDS)}, got {_backend!r}")


def active_backend() -> str:
    return _backend


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {sorted(_BACKENDS)}")
    _backend = name


def _use_numba() -> bool:
    return _backend == "numba"


# ---------------------------------------------------------------------------
# dispatching wrappers
# ---------------------------------------------------------------------------


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    return _nb_gelu_fwd(x) if _use_numba() else _np_gelu_fwd(x)


def gelu_bwd(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g)
    return _nb_gelu_bwd(x, g) if _use_numba() else _np_gelu_bwd(x, g)


def layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Rows of `x` normalized to zero mean / unit variance, then affine.

    Returns (y, xhat, rstd); xhat and rstd are cached for the backward pass.
    """
    x = np.ascontiguousarray(x)
    if _use_numba():
        return _nb_layernorm_fwd(x, gamma, beta, eps)
    return _np_layernorm_fwd(x, gamma, beta, eps)


def layernorm_bwd(xhat: np.ndarray, gamma: np.ndarray, rstd: np.ndarray, g: np.ndarray):
    g = np.ascontiguousarray(g)
    if _use_numba():
        return _nb_layernorm_bwd(xhat, gamma, rstd, g)
    return _np_layernorm_bwd(xhat, gamma, rstd, g)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    return _nb_softmax_fwd(x) if _use_numba() else _np_softmax_fwd(x)


def softmax_bwd(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    g = np.ascontiguousarray(g)
    return _nb_softmax_bwd(y, g) if _use_numba() else _np_softmax_bwd(y, g)


def adamw_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    b1: float,
    b2: float,
    eps: float,
    wd: float,
) -> None:
    """Fused decoupled-weight-decay Adam update, in place on 1-D views."""
    g = np.ascontiguousarray(g)
    if _use_numba():
        _nb_adamw_update(p, g, m, v, t, lr, b1, b2, eps, wd)
    else:
        _np_adamw_update(p, g, m, v, t, lr, b1, b2, eps, wd)
