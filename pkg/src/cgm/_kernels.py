"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``CGM_DISABLE_NUMBA`` is
unset (or ``0``). Both paths take and return C-contiguous float64 arrays of
rank 2 (rows x features); callers reshape higher-rank tensors before calling.
"""
import math
import os

import numpy as np
from scipy.special import erf as _erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class EmptySupportError(ValueError):
    pass


# ---------------------------------------------------------------- numpy path

def softmax_masked_np(x, mask):
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    if not mask.any(axis=1).all():
        raise EmptySupportError("empty attention support")
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd_np(g, xhat, rstd, gain):
    gh = g * gain
    gx = (gh - gh.mean(axis=1, keepdims=True)
          - xhat * (gh * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_fwd_np(x):
    return x * 0.5 * (1.0 + _erf(x / _SQRT2))


def gelu_bwd_np(x, g):
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def sample_rows_np(probs, u):
    """Inverse-CDF draw per row; ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def iso_gauss_logjoint_np(x, means, variances, log_weights):
    """log w_k + log N(x | mu_k, var_k I) for every row/component pair."""
    d = x.shape[1]
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return (log_weights[None, :] - 0.5 * d * np.log(2.0 * np.pi * variances)[None, :]
            - 0.5 * sq / variances[None, :])


# ---------------------------------------------------------------- numba path

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def softmax_masked(x, mask):
        n, d = x.shape
        out = np.zeros((n, d))
        for i in range(n):
            m = -np.inf
            for j in range(d):
                if mask[i, j] and x[i, j] > m:
                    m = x[i, j]
            if m == -np.inf:
                raise ValueError("empty attention support")
            s = 0.0
            for j in range(d):
                if mask[i, j]:
                    e = math.exp(x[i, j] - m)
                    out[i, j] = e
                    s += e
            for j in range(d):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def softmax_backward(y, g):
        n, d = y.shape
        out = np.empty((n, d))
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def layer_norm_fwd(x, gain, bias, eps):
        n, d = x.shape
        out = np.empty((n, d))
        xhat = np.empty((n, d))
        rstd = np.empty(n)
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
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, rstd

    @njit(cache=True)
    def layer_norm_bwd(g, xhat, rstd, gain):
        n, d = g.shape
        gx = np.empty((n, d))
        ggain = np.zeros(d)
        gbias = np.zeros(d)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gh = g[i, j] * gain[j]
                m1 += gh
                m2 += gh * xhat[i, j]
                ggain[j] += g[i, j] * xhat[i, j]
                gbias[j] += g[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = (g[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
        return gx, ggain, gbias

    @njit(cache=True)
    def gelu_fwd(x):
        n, d = x.shape
        out = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = v * 0.5 * (1.0 + math.erf(v / _SQRT2))
        return out

    @njit(cache=True)
    def gelu_bwd(x, g):
        n, d = x.shape
        out = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                cdf = 0.5 * (1.0 + math.erf(v / _SQRT2))
                pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
                out[i, j] = g[i, j] * (cdf + v * pdf)
        return out

    @njit(cache=True)
    def sample_rows(probs, u):
        n, d = probs.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            total = 0.0
            for j in range(d):
                total += probs[i, j]
            target = u[i] * total
            acc = 0.0
            k = d - 1
            for j in range(d):
                acc += probs[i, j]
                if acc > target:
                    k = j
                    break
            out[i] = k
        return out

    @njit(cache=True)
    def iso_gauss_logjoint(x, means, variances, log_weights):
        n, d = x.shape
        k = means.shape[0]
        out = np.empty((n, k))
        for c in range(k):
            norm = log_weights[c] - 0.5 * d * math.log(2.0 * math.pi * variances[c])
            inv = 0.5 / variances[c]
            for i in range(n):
                sq = 0.0
                for j in range(d):
                    t = x[i, j] - means[c, j]
                    sq += t * t
                out[i, c] = norm - sq * inv
        return out

    return {
        "softmax_masked": softmax_masked,
        "softmax_backward": softmax_backward,
        "layer_norm_fwd": layer_norm_fwd,
        "layer_norm_bwd": layer_norm_bwd,
        "gelu_fwd": gelu_fwd,
        "gelu_bwd": gelu_bwd,
        "sample_rows": sample_rows,
        "iso_gauss_logjoint": iso_gauss_logjoint,
    }


NUMPY_KERNELS = {
    "softmax_masked": softmax_masked_np,
    "softmax_backward": softmax_backward_np,
    "layer_norm_fwd": layer_norm_fwd_np,
    "layer_norm_bwd": layer_norm_bwd_np,
    "gelu_fwd": gelu_fwd_np,
    "gelu_bwd": gelu_bwd_np,
    "sample_rows": sample_rows_np,
    "iso_gauss_logjoint": iso_gauss_logjoint_np,
}

NUMBA_KERNELS = None
if os.environ.get("CGM_DISABLE_NUMBA", "0") in ("", "0"):
    try:
        NUMBA_KERNELS = _build_numba()
    except ImportError:
        NUMBA_KERNELS = None

BACKEND = "numba" if NUMBA_KERNELS is not None else "numpy"
_active = NUMBA_KERNELS if NUMBA_KERNELS is not None else NUMPY_KERNELS


def softmax_masked(x, mask=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if BACKEND == "numpy":
        return softmax_masked_np(x, mask)
    if mask is None:
        mask = np.ones(x.shape, dtype=np.bool_)
    try:
        return _active["softmax_masked"](x, np.ascontiguousarray(mask, dtype=np.bool_))
    except ValueError as exc:
        raise EmptySupportError(str(exc)) from None


def softmax_backward(y, g):
    return _active["softmax_backward"](np.ascontiguousarray(y), np.ascontiguousarray(g))


def layer_norm_fwd(x, gain, bias, eps):
    return _active["layer_norm_fwd"](np.ascontiguousarray(x), np.ascontiguousarray(gain),
                                     np.ascontiguousarray(bias), float(eps))


def layer_norm_bwd(g, xhat, rstd, gain):
    return _active["layer_norm_bwd"](np.ascontiguousarray(g), xhat, rstd,
                                     np.ascontiguousarray(gain))


def gelu_fwd(x):
    return _active["gelu_fwd"](np.ascontiguousarray(x))


def gelu_bwd(x, g):
    return _active["gelu_bwd"](np.ascontiguousarray(x), np.ascontiguousarray(g))


def sample_rows(probs, u):
    return _active["sample_rows"](np.ascontiguousarray(probs, dtype=np.float64),
                                  np.ascontiguousarray(u, dtype=np.float64))


def iso_gauss_logjoint(x, means, variances, log_weights):
    return _active["iso_gauss_logjoint"](
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(variances, dtype=np.float64),
        np.ascontiguousarray(log_weights, dtype=np.float64))
