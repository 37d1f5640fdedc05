"""Self-check commands: finite-difference gradients and a brute-force prox oracle."""
from __future__ import annotations

import numpy as np

from ..centralized import quantized_loss_grads
from ..net import Architecture, Batch, ParamVector, ce_loss_and_grad, forward, kd_grad_student, kd_grad_teacher, softmax
from ..quantizer import CenterVector, prox_x, soft_quantize, soft_quantize_jacobians

GRAD_TOL = 1e-3
FD_STEP = 1e-5
GRID_STEP = 1e-4


def _fd(fun, x, h=FD_STEP):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _rel(a, b) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def _kl(p, q):
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


def _centers(rng, m=4, P=None):
    c = np.sort(rng.uniform(-1, 1, size=m)) + 0.15 * np.arange(m)
    return CenterVector(c, P if P is not None else float(rng.uniform(1, 8)))


def gradcheck(seeds: int = 20) -> dict:
    """Max relative error of each analytic gradient against central differences."""
    worst = {k: 0.0 for k in ("ce", "kd_student", "kd_teacher", "soft_dx", "soft_dc",
                              "quantized_loss_x", "quantized_loss_c")}
    arch = Architecture((2, 16, 3), "tanh")
    qarch = Architecture((2, 6, 6, 3), "tanh")
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        batch = Batch(rng.normal(size=(8, 2)), rng.integers(0, 3, 8))
        x = rng.uniform(-0.7, 0.7, size=arch.n_params)
        p = ParamVector(x, arch)
        logits = lambda v: forward(ParamVector(v, arch), batch)

        _, g = ce_loss_and_grad(p, batch)
        worst["ce"] = max(worst["ce"], _rel(g, _fd(lambda v: ce_loss_and_grad(ParamVector(v, arch), batch)[0], x)))

        other = softmax(rng.normal(size=(8, 3)))
        g = kd_grad_student(p, other, batch)
        worst["kd_student"] = max(worst["kd_student"],
                                  _rel(g, _fd(lambda v: _kl(other, softmax(logits(v))), x)))
        g = kd_grad_teacher(p, other, batch)
        worst["kd_teacher"] = max(worst["kd_teacher"],
                                  _rel(g, _fd(lambda v: _kl(softmax(logits(v)), other), x)))

        c = _centers(rng)
        xs = rng.uniform(-1.5, 1.5, size=6)
        dx, dc = soft_quantize_jacobians(xs, c)
        fd_dx = np.array([_fd(lambda v: soft_quantize(v, c)[0], xs[i:i + 1])[0] for i in range(xs.size)])
        worst["soft_dx"] = max(worst["soft_dx"], _rel(dx, fd_dx))
        fd_dc = np.stack([_fd(lambda cc: soft_quantize(xs[i:i + 1], c.replace(cc))[0], c.centers.copy())
                          for i in range(xs.size)], axis=1)
        worst["soft_dc"] = max(worst["soft_dc"], _rel(dc, fd_dc))

        # f(Q(x)) for a small net whose middle block is quantized
        qb = Batch(rng.normal(size=(5, 2)), rng.integers(0, 3, 5))
        mask = qarch.mask_vector()
        xq = rng.uniform(-0.8, 0.8, size=qarch.n_params)
        cq = _centers(rng, 4, 4.0)
        f = lambda v: ce_loss_and_grad(ParamVector(v, qarch), qb)

        def fq(v, cc):
            z = v.copy()
            z[mask] = soft_quantize(v[mask], cq.replace(cc))
            return f(z)[0]
        _, gx, gc = quantized_loss_grads(f, xq, cq, mask)
        worst["quantized_loss_x"] = max(worst["quantized_loss_x"],
                                        _rel(gx, _fd(lambda v: fq(v, cq.centers), xq)))
        worst["quantized_loss_c"] = max(worst["quantized_loss_c"],
                                        _rel(gc, _fd(lambda cc: fq(xq, cc), cq.centers.copy())))
    return worst


def grid_prox_scalar(y: float, c: np.ndarray, t: float, step: float = GRID_STEP) -> float:
    """Minimize 0.5 (v - y)^2 + t |v - Q(v)| over a grid that also contains the centers."""
    lo, hi = min(y, c[0]) - 1.0, max(y, c[-1]) + 1.0
    grid = np.concatenate([np.arange(lo, hi + step, step), c])
    dist = np.min(np.abs(grid[:, None] - c[None, :]), axis=1)
    return float(grid[np.argmin(0.5 * (grid - y) ** 2 + t * dist)])


def proxcheck(cases: int = 100, seed: int = 0) -> tuple:
    """Largest gap between prox_x and the grid minimizer over seeded cases.

    Returns ``(max_gap, resolution)``; the check passes when max_gap <= resolution.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 5))
        m = int(rng.integers(2, 5))
        c = np.sort(rng.uniform(-1, 1, size=m)) + 0.05 * np.arange(m)
        y = rng.uniform(-1.5, 1.5, size=d)
        t = float(rng.uniform(0, 0.3))
        got = prox_x(y, CenterVector(c), t)
        for yi, gi in zip(y, got):
            worst = max(worst, abs(gi - grid_prox_scalar(yi, c, t)))
    return worst, GRID_STEP
