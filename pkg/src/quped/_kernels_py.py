"""Reference numpy implementations of the quantizer kernels.

Same signatures and results as the compiled ``_kernels`` module; used when the
extension is not built or when ``QUPED_PURE_PYTHON=1``.
"""
import numpy as np


def assign(x, c):
    """Index of the nearest center per entry; ties go to the lower index."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    m = c.shape[0]
    hi = np.searchsorted(c, x, side="left")
    hi = np.clip(hi, 1, m - 1)
    lo = hi - 1
    take_lo = np.abs(x - c[lo]) <= np.abs(x - c[hi])
    return np.where(take_lo, lo, hi).astype(np.int64)


def prox_x(y, c, t):
    y = np.ascontiguousarray(y, dtype=np.float64)
    q = np.asarray(c, dtype=np.float64)[assign(y, c)]
    return np.where(y >= q + t, y - t, np.where(y <= q - t, y + t, q))


def group_sum(idx, upstream, m):
    return np.bincount(idx, weights=upstream, minlength=m).astype(np.float64)


def signed_counts(x, c, idx):
    """Per center: #members above it minus #members below it."""
    x = np.asarray(x, dtype=np.float64)
    cj = np.asarray(c, dtype=np.float64)[idx]
    sign = (x > cj).astype(np.float64) - (x < cj).astype(np.float64)
    return np.bincount(idx, weights=sign, minlength=len(c)).astype(np.float64)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _stage_sigmoids(x, c, P):
    mids = 0.5 * (c[1:] + c[:-1])
    return _sigmoid(P * (x[None, :] - mids[:, None]))


def soft_quantize(x, c, P):
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    s = _stage_sigmoids(x, c, P)
    return c[0] + (np.diff(c)[:, None] * s).sum(axis=0)


def soft_dx(x, c, P):
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    s = _stage_sigmoids(x, c, P)
    return P * (np.diff(c)[:, None] * s * (1.0 - s)).sum(axis=0)


def soft_dc(x, c, P):
    """Dense (m, n) matrix of partials d Q(x)_i / d c_j."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    m = c.shape[0]
    s = _stage_sigmoids(x, c, P)             # row k-1 <-> stage between c_{k-1}, c_k
    ds = s * (1.0 - s)
    half = 0.5 * P * np.diff(c)[:, None] * ds
    out = np.zeros((m, x.shape[0]))
    out[0] = 1.0
    out[1:] += s - half
    out[:-1] += -s - half
    return out


def soft_vjp_c(x, c, P, upstream):
    return soft_dc(x, c, P) @ np.asarray(upstream, dtype=np.float64)
