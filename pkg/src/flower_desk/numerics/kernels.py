"""Fused row kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``FLOWER_DESK_KERNELS``
(``numba`` or ``numpy``; default ``numba`` when it imports) and can be
switched at runtime with :func:`set_backend`. Both paths compute the same
quantities; results agree to floating-point rounding, not bit-for-bit.

All row kernels operate on 2-D C-contiguous arrays, normalizing or
softmaxing along the last axis. Exp-bound forwards (softmax, SiLU) stay on
numpy in both modes: without SVML numba's scalar exp loses to numpy's
vectorized one. Their backwards are pure arithmetic and are fused.
"""
from __future__ import annotations

import logging
import os

import numpy as np

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ----------------------------------------------------------------------------
# numpy reference path


def _np_rms_norm_fwd(x, gain, eps):
    ms = np.mean(x * x, axis=1)
    inv = 1.0 / np.sqrt(ms + eps)
    return x * inv[:, None] * gain, inv.astype(x.dtype, copy=False)


def _np_rms_norm_bwd(g, x, gain, inv):
    d = x.shape[1]
    xhat = x * inv[:, None]
    ggain = np.sum(g * xhat, axis=0)
    gy = g * gain
    dot = np.sum(gy * x, axis=1)
    gx = inv[:, None] * gy - x * (inv * inv * inv * dot / d)[:, None]
    return gx, ggain


def _np_softmax_fwd(x):
    z = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def _np_softmax_bwd(g, y):
    return y * (g - np.sum(g * y, axis=1, keepdims=True))


def _np_silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _np_silu_bwd(g, x, s):
    return g * (s * (1.0 + x * (1.0 - s)))


def _np_adamw(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    p *= 1.0 - lr * wd
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ----------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def _nb_rms_norm_fwd(x, gain, eps):
        n, d = x.shape
        y = np.empty_like(x)
        inv = np.empty(n, dtype=x.dtype)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += x[i, j] * x[i, j]
            r = 1.0 / np.sqrt(acc / d + eps)
            inv[i] = r
            for j in range(d):
                y[i, j] = x[i, j] * r * gain[j]
        return y, inv

    @_jit
    def _nb_rms_norm_bwd(g, x, gain, inv):
        n, d = x.shape
        gx = np.empty_like(x)
        ggain = np.zeros(d, dtype=np.float64)
        for i in range(n):
            r = inv[i]
            dot = 0.0
            for j in range(d):
                gy = g[i, j] * gain[j]
                dot += gy * x[i, j]
                ggain[j] += g[i, j] * x[i, j] * r
            c = r * r * r * dot / d
            for j in range(d):
                gx[i, j] = r * g[i, j] * gain[j] - x[i, j] * c
        return gx, ggain.astype(x.dtype)

    @_jit
    def _nb_softmax_bwd(g, y):
        n, d = y.shape
        gx = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (g[i, j] - dot)
        return gx

    @_jit
    def _nb_silu_bwd(g, x, s):
        fx = x.ravel()
        fg = g.ravel()
        fs = s.ravel()
        out = np.empty_like(fx)
        for i in range(fx.size):
            si = fs[i]
            out[i] = fg[i] * (si * (1.0 + fx[i] * (1.0 - si)))
        return out.reshape(x.shape)

    @_jit
    def _nb_adamw(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
        fp = p.reshape(-1)
        fg = g.reshape(-1)
        fm = m.reshape(-1)
        fv = v.reshape(-1)
        # hoisted scalars keep the loop free of per-element divisions by constants
        decay = 1.0 - lr * wd
        c1 = 1.0 - b1
        c2 = 1.0 - b2
        step = lr / bc1
        inv_bc2 = 1.0 / bc2
        for i in range(fp.size):
            gi = fg[i]
            mi = b1 * fm[i] + c1 * gi
            vi = b2 * fv[i] + c2 * gi * gi
            fm[i] = mi
            fv[i] = vi
            fp[i] = fp[i] * decay - step * mi / (np.sqrt(vi * inv_bc2) + eps)


_NUMPY = {
    "rms_norm_fwd": _np_rms_norm_fwd,
    "rms_norm_bwd": _np_rms_norm_bwd,
    "softmax_fwd": _np_softmax_fwd,
    "softmax_bwd": _np_softmax_bwd,
    "silu_fwd": _np_silu_fwd,
    "silu_bwd": _np_silu_bwd,
    "adamw": _np_adamw,
}

if HAVE_NUMBA:
    _NUMBA = {
        "rms_norm_fwd": _nb_rms_norm_fwd,
        "rms_norm_bwd": _nb_rms_norm_bwd,
        "softmax_fwd": _np_softmax_fwd,
        "softmax_bwd": _nb_softmax_bwd,
        "silu_fwd": _np_silu_fwd,
        "silu_bwd": _nb_silu_bwd,
        "adamw": _nb_adamw,
    }
else:  # pragma: no cover
    _NUMBA = None

BACKEND = "numpy"


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for the whole process."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    table = _NUMBA if name == "numba" else _NUMPY
    globals().update(table)
    BACKEND = name


def _initial_backend() -> str:
    want = os.environ.get("FLOWER_DESK_KERNELS", "").strip().lower()
    if want == "numpy" or not HAVE_NUMBA:
        return "numpy"
    return "numba"


# placeholders replaced by set_backend
rms_norm_fwd = rms_norm_bwd = softmax_fwd = softmax_bwd = None
silu_fwd = silu_bwd = adamw = None

set_backend(_initial_backend())
