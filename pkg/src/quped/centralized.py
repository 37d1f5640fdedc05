"""Alternating proximal training of weights and quantization centers.

One step, for a smooth loss ``f`` and the distance penalty ``R``::

    g     = grad f(x) + grad_x f(Q(x))
    x_new = prox_x(x - eta1 * g, c, eta1 * lam / 2)          (masked entries)
    h     = grad_c f(Q_c(x_new))
    c_new = prox_c(c - eta2 * h, c, x_new, eta2 * lam / 2)

``Q`` is the soft quantizer for finite ``P`` and the nearest-center map in
hard mode, where the quantized-loss x-gradient is dropped.  Only entries
selected by the quantization mask take part in ``Q`` and ``R``; the remaining
entries see plain gradient steps.

A loss is any callable ``values -> (loss, grad)``.  :func:`ce_objective`
builds one for a classifier and a mini-batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import kernels
from .data import BatchStream, Dataset
from .errors import ConfigError, NumericError
from .metrics import MetricsRecord
from .net import Architecture, Batch, ParamVector, ce_from_logits, ce_loss_and_grad, forward_pass, init_params
from .quantizer import (CenterVector, distance_R, hard_quantize, init_centers, levels_for_bits, prox_c,
                        prox_x, quantize, quantized_vjp, repair_centers)

Objective = Callable[[np.ndarray], tuple]

LAMBDA_KINDS = ("linear", "linear_over_decay", "constant")


@dataclass(frozen=True)
class LambdaSchedule:
    """Penalty weight per optimizer step.

    ``linear``: coefficient * t.  ``linear_over_decay``: coefficient * t / decay**t.
    ``constant``: coefficient.
    """
    kind: str = "linear"
    coefficient: float = 1e-4
    decay: float = 0.99

    def __post_init__(self):
        if self.kind not in LAMBDA_KINDS:
            raise ConfigError(f"lambda kind must be one of {LAMBDA_KINDS}, got {self.kind!r}")
        if not self.coefficient >= 0:
            raise ConfigError(f"lambda coefficient must be >= 0, got {self.coefficient}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"lambda decay must be in (0, 1], got {self.decay}")

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return float(self.coefficient)
        if self.kind == "linear":
            return float(self.coefficient * t)
        return float(self.coefficient * t * math.exp(-t * math.log(self.decay)))


@dataclass(frozen=True)
class CentralState:
    x: np.ndarray
    c: Optional[CenterVector]          # None trains in full precision
    t: int = 0
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    eta1: float = 0.1
    eta2: float = 1e-4
    mask: Optional[np.ndarray] = None  # None quantizes every entry
    arch: Optional[Architecture] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        object.__setattr__(self, "x", x)
        if x.ndim != 1:
            raise ConfigError("x must be a flat vector")
        if self.t < 0:
            raise ConfigError(f"step counter must be >= 0, got {self.t}")
        if not (self.eta1 > 0 and self.eta2 > 0):
            raise ConfigError(f"step sizes must be positive, got eta1={self.eta1}, eta2={self.eta2}")
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(x.size, dtype=bool))
        elif self.mask.shape != x.shape:
            raise ConfigError("mask must match x")

    @property
    def quantized(self) -> bool:
        return self.c is not None

    def params(self) -> ParamVector:
        if self.arch is None:
            raise ConfigError("state has no architecture attached")
        return ParamVector(self.x, self.arch)


def ce_objective(arch: Architecture, batch: Batch) -> Objective:
    def f(values):
        return ce_loss_and_grad(ParamVector(values, arch), batch)
    return f


def _as_objective(state: CentralState, objective) -> Objective:
    if isinstance(objective, Batch):
        if state.arch is None:
            raise ConfigError("a Batch objective needs state.arch")
        return ce_objective(state.arch, objective)
    return objective


def _check_finite(what: str, t: int, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite {what} at step {t}")


def quantized_point(x, c: CenterVector, mask) -> np.ndarray:
    """Copy of ``x`` with masked entries replaced by ``Q_c``."""
    z = x.copy()
    z[mask] = quantize(x[mask], c)
    return z


def quantized_loss_grads(f: Objective, x, c: CenterVector, mask):
    """``(f(Q(x)), grad_x f(Q(x)), grad_c f(Q(x)))`` through the masked quantizer."""
    z = quantized_point(x, c, mask)
    loss, gz = f(z)
    if c.hard:
        # the nearest-center map has zero x-derivative; the whole term is dropped
        gx = np.zeros_like(x)
        _, gc = quantized_vjp(x[mask], c, gz[mask])
    else:
        gx = gz.copy()
        gx[mask], gc = quantized_vjp(x[mask], c, gz[mask])
    return loss, gx, gc


def centralized_step(state: CentralState, objective) -> CentralState:
    """One alternating proximal step; ``objective`` is a loss callable or a Batch."""
    f = _as_objective(state, objective)
    x, c, t, mask = state.x, state.c, state.t, state.mask
    loss, gx = f(x)
    _check_finite("loss/gradient", t, loss, gx)
    if c is None:
        x_new = x - state.eta1 * gx
        _check_finite("weights", t, x_new)
        return replace(state, x=x_new, t=t + 1)

    lam = state.schedule(t)
    _check_finite("lambda", t, lam)
    loss_q, gq, _ = quantized_loss_grads(f, x, c, mask)
    _check_finite("quantized loss/gradient", t, loss_q, gq)
    y = x - state.eta1 * (gx + gq)
    x_new = y.copy()
    x_new[mask] = prox_x(y[mask], c, state.eta1 * lam / 2)

    _, _, h = quantized_loss_grads(f, x_new, c, mask)
    _check_finite("center gradient", t, h, x_new)
    c_new = prox_c(c.centers - state.eta2 * h, c, x_new[mask], state.eta2 * lam / 2)
    return replace(state, x=x_new, c=c_new, t=t + 1)


def penalized_objective(state: CentralState, objective, lam: Optional[float] = None) -> float:
    """``f(x) + f(Q(x)) + lam * R(x, c)`` with ``lam`` defaulting to schedule(t)."""
    f = _as_objective(state, objective)
    loss = f(state.x)[0]
    if state.c is None:
        return float(loss)
    if lam is None:
        lam = state.schedule(state.t)
    loss_q = f(quantized_point(state.x, state.c, state.mask))[0]
    return float(loss + loss_q + lam * distance_R(state.x[state.mask], state.c))


def _smooth_grads(f, x, c, mask):
    _, gx = f(x)
    _, gqx, gqc = quantized_loss_grads(f, x, c, mask)
    return gx + gqx, gqc


def gradient_mapping_sq(before: CentralState, after: CentralState, objective) -> float:
    """Squared norm of the stationarity measure for the step ``before -> after``.

    With S the smooth part (loss plus quantized loss)::

        G_x = (x - x+) / eta1 + grad_x S(x+, c) - grad_x S(x, c)
        G_c = (c - c+) / eta2 + grad_c S(x+, c+) - grad_c S(x+, c)

    which lies in the subdifferential of the penalized objective at (x+, c+).
    """
    f = _as_objective(before, objective)
    if before.c is None:
        _, g = f(after.x)
        return float(g @ g)
    mask = before.mask
    gx_old, _ = _smooth_grads(f, before.x, before.c, mask)
    gx_mid, gc_mid = _smooth_grads(f, after.x, before.c, mask)
    _, gc_new = _smooth_grads(f, after.x, after.c, mask)
    Gx = (before.x - after.x) / before.eta1 + gx_mid - gx_old
    Gc = (before.c.centers - after.c.centers) / before.eta2 + gc_new - gc_mid
    return float(Gx @ Gx + Gc @ Gc)


# ---------------------------------------------------------------------------
# fine-tuning after hard quantization

@dataclass(frozen=True)
class FrozenState:
    """Masked weights pinned to ``c[index]``; unmasked weights and centers train."""
    x: np.ndarray
    c: CenterVector
    index: np.ndarray
    mask: np.ndarray


def freeze(x, c: CenterVector, mask) -> FrozenState:
    x = x.copy()
    q, assignment = hard_quantize(x[mask], c)
    x[mask] = q
    return FrozenState(x, c, assignment.index, mask)


def fine_tune_step(fs: FrozenState, f: Objective, eta1: float, eta2: float) -> FrozenState:
    loss, g = f(fs.x)
    _check_finite("fine-tune loss/gradient", -1, loss, g)
    x = fs.x.copy()
    free = ~fs.mask
    x[free] -= eta1 * g[free]
    raw = fs.c.centers - eta2 * kernels.group_sum(fs.index, g[fs.mask], fs.c.m)
    order = np.argsort(raw, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    c = fs.c.replace(repair_centers(raw[order], fs.c.c_max))
    index = rank[fs.index]
    x[fs.mask] = c.centers[index]
    return FrozenState(x, c, index, fs.mask)


# ---------------------------------------------------------------------------
# full training run

@dataclass(frozen=True)
class CentralConfig:
    arch: Architecture
    bits: Optional[int] = 2            # None -> full precision
    P: float = math.inf
    c_max: float = 10.0
    eta1: float = 0.1
    eta1_decay: float = 0.99           # multiplied in once per epoch
    eta2: float = 1e-4
    eta2_drops: tuple = ()             # epochs at which eta2 is divided by 10
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    epochs: int = 10
    fine_tune_epochs: int = 0
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.fine_tune_epochs < 0:
            raise ConfigError(f"fine_tune_epochs must be >= 0, got {self.fine_tune_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.eta1_decay <= 1:
            raise ConfigError(f"eta1_decay must be in (0, 1], got {self.eta1_decay}")


@dataclass
class CentralResult:
    x_final: ParamVector
    c_final: Optional[CenterVector]
    x_hard: ParamVector
    metrics: list


def eta_at(eta: float, decay: float, epoch: int) -> float:
    return eta * decay ** epoch


def eta2_at(eta2: float, drops, epoch: int) -> float:
    return eta2 * 0.1 ** sum(1 for e in drops if epoch >= e)


def initial_state(cfg: CentralConfig, seed: int) -> CentralState:
    x0 = init_params(cfg.arch, seed).values
    mask = cfg.arch.mask_vector()
    c = None
    if cfg.bits is not None and mask.any():
        c = init_centers(x0[mask], levels_for_bits(cfg.bits), cfg.c_max, cfg.P)
    return CentralState(x0, c, 0, cfg.schedule, cfg.eta1, cfg.eta2, mask, cfg.arch)


def evaluate(state: CentralState, eval_batch: Optional[Batch], stat_batch: Batch,
             client_id: int = -1, objective: Optional[Objective] = None) -> MetricsRecord:
    """Metrics at the current iterate.

    Accuracy and loss come from ``eval_batch`` (falls back to ``stat_batch``).
    ``grad_norm_sq`` is the stationarity measure of one full-batch step on
    ``stat_batch`` taken from the current state (the state itself is unchanged).
    """
    arch = state.arch
    eval_batch = eval_batch if eval_batch is not None else stat_batch
    f = objective if objective is not None else ce_objective(arch, stat_batch)

    loss_fp, acc_fp = _loss_acc(arch, state.x, eval_batch)
    if state.c is None:
        loss_hard, acc_hard, R = loss_fp, acc_fp, 0.0
        lam = 0.0
    else:
        xh = state.x.copy()
        xh[state.mask] = hard_quantize(state.x[state.mask], state.c)[0]
        loss_hard, acc_hard = _loss_acc(arch, xh, eval_batch)
        R = distance_R(state.x[state.mask], state.c)
        lam = state.schedule(state.t)
    probe = centralized_step(state, f)
    gn = gradient_mapping_sq(state, probe, f)
    return MetricsRecord(state.t, client_id, loss_fp, acc_fp, loss_hard, acc_hard, gn, lam, R)


def _loss_acc(arch, values, batch):
    logits, _ = forward_pass(arch, values, batch.inputs)
    return ce_from_logits(logits, batch.labels), float((logits.argmax(axis=1) == batch.labels).mean())


def train_centralized(cfg: CentralConfig, train: Dataset, test: Optional[Dataset] = None,
                      indices=None) -> CentralResult:
    """Main phase of alternating proximal steps, then optional fine-tuning.

    Metrics are recorded before training and after every epoch (main and
    fine-tune phases alike).
    """
    if indices is None:
        indices = np.arange(len(train))
    if len(indices) == 0:
        raise ConfigError("training set is empty")
    stream = BatchStream(train, indices, cfg.batch_size, cfg.seed)
    full = train.batch(np.asarray(indices))
    test_batch = test.batch() if test is not None else None
    state = initial_state(cfg, cfg.seed)
    metrics = [evaluate(state, test_batch, full)]
    spe = stream.steps_per_epoch
    for epoch in range(cfg.epochs):
        state = replace(state, eta1=eta_at(cfg.eta1, cfg.eta1_decay, epoch),
                        eta2=eta2_at(cfg.eta2, cfg.eta2_drops, epoch))
        for _ in range(spe):
            state = centralized_step(state, stream.next())
        metrics.append(evaluate(state, test_batch, full))

    x_final = state.params()
    if state.c is None:
        return CentralResult(x_final, None, x_final.copy(), metrics)

    fs = freeze(state.x, state.c, state.mask)
    for epoch in range(cfg.epochs, cfg.epochs + cfg.fine_tune_epochs):
        eta1 = eta_at(cfg.eta1, cfg.eta1_decay, epoch)
        eta2 = eta2_at(cfg.eta2, cfg.eta2_drops, epoch)
        for _ in range(spe):
            fs = fine_tune_step(fs, ce_objective(cfg.arch, stream.next()), eta1, eta2)
        state = replace(state, x=fs.x, c=fs.c, t=state.t + spe)
        metrics.append(evaluate(state, test_batch, full))
    return CentralResult(x_final, fs.c, ParamVector(fs.x, cfg.arch), metrics)
