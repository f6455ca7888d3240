"""Numeric kernels with a numba fast path and a pure-numpy fallback.

The active lane is chosen once at import time: numba when available, unless
``SIGNMAML_PURE_NUMPY=1`` forces the numpy lane. ``BACKEND`` records the
choice. Both implementations stay importable (``NUMPY_IMPLS`` /
``NUMBA_IMPLS``) so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.

Matrix products are delegated to numpy (BLAS) in both lanes; the kernels
here are the elementwise / row-wise loops that sit between the matmuls.
"""

import os

import numpy as np


# ---------------------------------------------------------------------------
# numpy lane
# ---------------------------------------------------------------------------

def _np_relu_fwd(x):
    return np.maximum(x, 0.0)


def _np_relu_mask(x):
    return (x > 0.0).astype(np.float64)


def _np_sign_fwd(x):
    return np.sign(x)


def _np_softmax_fwd(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _np_xent_fwd(z, labels):
    m = z.max(axis=1)
    lse = np.log(np.exp(z - m[:, None]).sum(axis=1)) + m
    picked = z[np.arange(z.shape[0]), labels]
    return float(np.mean(lse - picked))


def _np_sgd_step(y, g, beta):
    return y - beta * g


def _np_sign_step(y, g, beta):
    return y - beta * np.sign(g)


NUMPY_IMPLS = {
    "relu_fwd": _np_relu_fwd,
    "relu_mask": _np_relu_mask,
    "sign_fwd": _np_sign_fwd,
    "softmax_fwd": _np_softmax_fwd,
    "xent_fwd": _np_xent_fwd,
    "sgd_step": _np_sgd_step,
    "sign_step": _np_sign_step,
}


# ---------------------------------------------------------------------------
# numba lane
# ---------------------------------------------------------------------------

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

if njit is not None:

    @njit(cache=True)
    def _nb_relu_fwd(x):
        flat = x.ravel()
        out = np.empty(flat.shape[0])
        for i in range(flat.shape[0]):
            v = flat[i]
            out[i] = v if v > 0.0 else 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_relu_mask(x):
        flat = x.ravel()
        out = np.empty(flat.shape[0])
        for i in range(flat.shape[0]):
            out[i] = 1.0 if flat[i] > 0.0 else 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_sign_fwd(x):
        flat = x.ravel()
        out = np.empty(flat.shape[0])
        for i in range(flat.shape[0]):
            v = flat[i]
            if v > 0.0:
                out[i] = 1.0
            elif v < 0.0:
                out[i] = -1.0
            else:
                out[i] = 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_softmax_fwd(z):
        b, n = z.shape
        out = np.empty((b, n))
        for i in range(b):
            m = z[i, 0]
            for j in range(1, n):
                if z[i, j] > m:
                    m = z[i, j]
            s = 0.0
            for j in range(n):
                e = np.exp(z[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(n):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _nb_xent_fwd(z, labels):
        b, n = z.shape
        total = 0.0
        for i in range(b):
            m = z[i, 0]
            for j in range(1, n):
                if z[i, j] > m:
                    m = z[i, j]
            s = 0.0
            for j in range(n):
                s += np.exp(z[i, j] - m)
            total += np.log(s) + m - z[i, labels[i]]
        return total / b

    @njit(cache=True)
    def _nb_sgd_step(y, g, beta):
        out = np.empty(y.shape[0])
        for i in range(y.shape[0]):
            out[i] = y[i] - beta * g[i]
        return out

    @njit(cache=True)
    def _nb_sign_step(y, g, beta):
        out = np.empty(y.shape[0])
        for i in range(y.shape[0]):
            v = g[i]
            if v > 0.0:
                out[i] = y[i] - beta
            elif v < 0.0:
                out[i] = y[i] + beta
            else:
                out[i] = y[i]
        return out

    NUMBA_IMPLS = {
        "relu_fwd": _nb_relu_fwd,
        "relu_mask": _nb_relu_mask,
        "sign_fwd": _nb_sign_fwd,
        "softmax_fwd": _nb_softmax_fwd,
        "xent_fwd": _nb_xent_fwd,
        "sgd_step": _nb_sgd_step,
        "sign_step": _nb_sign_step,
    }
else:
    NUMBA_IMPLS = None


def _pure_numpy_forced():
    return os.environ.get("SIGNMAML_PURE_NUMPY", "0").lower() not in ("0", "", "false")


if NUMBA_IMPLS is not None and not _pure_numpy_forced():
    BACKEND = "numba"
    _ACTIVE = NUMBA_IMPLS
else:
    BACKEND = "numpy"
    _ACTIVE = NUMPY_IMPLS

relu_fwd = _ACTIVE["relu_fwd"]
relu_mask = _ACTIVE["relu_mask"]
sign_fwd = _ACTIVE["sign_fwd"]
softmax_fwd = _ACTIVE["softmax_fwd"]
xent_fwd = _ACTIVE["xent_fwd"]
sgd_step = _ACTIVE["sgd_step"]
sign_step = _ACTIVE["sign_step"]
