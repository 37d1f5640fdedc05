"""Quantizers, the distance penalty and its proximal maps.

All functions act on the *masked* part of a parameter vector, i.e. a plain
1-D array holding only the entries that are being quantized.  One
:class:`CenterVector` is shared by all masked blocks of a model.

``P = math.inf`` selects hard mode: the soft quantizer is replaced by the
nearest-center map, its x-gradient is taken as zero and the center gradient
becomes a grouped sum over the assignment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError

DEFAULT_C_MAX = 10.0


@dataclass(frozen=True)
class CenterVector:
    centers: np.ndarray
    P: float = math.inf
    c_max: float = DEFAULT_C_MAX

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        if c.ndim != 1 or c.size < 2:
            raise ConfigError(f"need at least 2 centers, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise ConfigError("centers must be finite")
        if np.any(np.diff(c) <= 0):
            raise ConfigError(f"centers must be strictly ascending: {c}")
        if np.any(np.abs(c) > self.c_max):
            raise ConfigError(f"centers exceed c_max={self.c_max}: {c}")
        if not self.P > 0:
            raise ConfigError(f"sharpness P must be positive, got {self.P}")

    @property
    def m(self) -> int:
        return self.centers.size

    @property
    def hard(self) -> bool:
        return math.isinf(self.P)

    def replace(self, centers) -> "CenterVector":
        return CenterVector(centers, self.P, self.c_max)


@dataclass(frozen=True)
class QuantAssignment:
    index: np.ndarray
    m: int


def levels_for_bits(bits: int) -> int:
    if bits < 1:
        raise ConfigError(f"bit width must be >= 1, got {bits}")
    return 2 ** bits


def hard_quantize(x, c: CenterVector):
    idx = kernels.assign(x, c.centers)
    return c.centers[idx], QuantAssignment(idx, c.m)


def soft_quantize(x, c: CenterVector) -> np.ndarray:
    if c.hard:
        raise ValueError("soft_quantize needs a finite P; use hard_quantize in hard mode")
    return kernels.soft_quantize(x, c.centers, c.P)


def soft_quantize_jacobians(x, c: CenterVector):
    """Return ``(dQ/dx diagonal, dQ/dc)`` with dQ/dc of shape ``(m, len(x))``."""
    if c.hard:
        raise ValueError("soft quantizer Jacobians need a finite P")
    return kernels.soft_dx(x, c.centers, c.P), kernels.soft_dc(x, c.centers, c.P)


def grad_c_hard_mode(assignment: QuantAssignment, upstream) -> np.ndarray:
    return kernels.group_sum(assignment.index, upstream, assignment.m)


def quantized_vjp(x, c: CenterVector, upstream):
    """Chain rule through the quantizer for a masked upstream gradient.

    Returns ``(grad_x, grad_c)``.  In hard mode grad_x is zero.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if c.hard:
        idx = kernels.assign(x, c.centers)
        return np.zeros_like(upstream), kernels.group_sum(idx, upstream, c.m)
    dx = kernels.soft_dx(x, c.centers, c.P)
    return dx * upstream, kernels.soft_vjp_c(x, c.centers, c.P, upstream)


def quantize(x, c: CenterVector) -> np.ndarray:
    """Hard or soft quantization depending on ``c.P``."""
    if c.hard:
        return c.centers[kernels.assign(x, c.centers)]
    return kernels.soft_quantize(x, c.centers, c.P)


def distance_R(x, c: CenterVector) -> float:
    x = np.asarray(x, dtype=np.float64)
    q = c.centers[kernels.assign(x, c.centers)]
    return 0.5 * float(np.abs(q - x).sum())


def prox_x(y, c: CenterVector, t: float) -> np.ndarray:
    """Prox of ``t * 2 * R(., c)`` (threshold t = step * lambda / 2).

    Entries more than ``t`` away from their nearest center move ``t`` toward
    it; the rest snap onto the center.
    """
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    return kernels.prox_x(y, c.centers, float(t))


def prox_c(mu, c_prev: CenterVector, x_new, t: float) -> CenterVector:
    """Linearized prox step on the centers.

    Each center moves by ``t`` per assigned weight above it, and back by ``t``
    per assigned weight below it (assignments against ``c_prev``), i.e. toward
    the median of its group.  Weights sitting exactly on a center do not count.
    """
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != c_prev.centers.shape:
        raise ConfigError("mu must have one entry per center")
    idx = kernels.assign(x_new, c_prev.centers)
    counts = kernels.signed_counts(x_new, c_prev.centers, idx)
    return c_prev.replace(repair_centers(mu + t * counts, c_prev.c_max))


def repair_centers(c, c_max: float = DEFAULT_C_MAX) -> np.ndarray:
    """Clip, sort and separate ties so the CenterVector invariants hold."""
    c = np.sort(np.clip(np.asarray(c, dtype=np.float64), -c_max, c_max))
    for j in range(1, c.size):
        if c[j] <= c[j - 1]:
            c[j] = np.nextafter(c[j - 1], np.inf)
    if c[-1] > c_max:
        # ties pushed the top past the bound; rebuild downward from c_max
        c[-1] = c_max
        for j in range(c.size - 2, -1, -1):
            if c[j] >= c[j + 1]:
                c[j] = np.nextafter(c[j + 1], -np.inf)
    return c


def init_centers(w0, m: int, c_max: float = DEFAULT_C_MAX, P: float = math.inf) -> CenterVector:
    """Quantile initialization from the initial masked weights.

    For even ``m`` the positive half sits at the (k - 1/2)/(m/2) quantiles of
    ``|w0|`` and is mirrored; odd ``m`` uses the (k - 1/2)/m quantiles of w0.
    """
    if m < 2:
        raise ConfigError(f"need m >= 2 levels, got {m}")
    w0 = np.clip(np.asarray(w0, dtype=np.float64).ravel(), -c_max, c_max)
    if w0.size == 0:
        raise ConfigError("cannot initialize centers from an empty weight vector")
    if m % 2 == 0:
        half = m // 2
        probs = (np.arange(1, half + 1) - 0.5) / half
        pos = np.quantile(np.abs(w0), probs)
        c = np.concatenate([-pos[::-1], pos])
    else:
        probs = (np.arange(1, m + 1) - 0.5) / m
        c = np.quantile(w0, probs)
    span = float(np.ptp(w0)) or 1.0
    c = np.sort(c)
    for j in range(1, m):
        if c[j] <= c[j - 1]:
            c[j] = c[j - 1] + 1e-6 * span
    return CenterVector(repair_centers(c, c_max), P, c_max)
