"""Federated simulation: personalized quantized training with distillation.

Every client keeps a personalized model ``x_i`` (own architecture and bit
width), centers ``c_i`` and a local copy ``w_i`` of the shared global model.
At global step ``t``:

* if ``tau`` divides ``t`` the server averages the ``w_i`` and broadcasts the
  mean; ``x_i`` and ``c_i`` do not move that step;
* otherwise each client takes one local step on one mini-batch: an
  alternating proximal step on ``(x_i, c_i)`` for the mixed loss
  ``(1 - lambda_p) * CE + lambda_p * KD(w_i -> student)``, then a distillation
  step on ``w_i`` toward the updated student and its quantized version.

Learning rates and the penalty schedule are indexed by each client's own
count of local steps, so a client's trajectory does not depend on how many
sync steps were interleaved.  FedAvg and local-only baselines share the same
step loop.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .centralized import (CentralState, LambdaSchedule, eta2_at, eta_at, evaluate, fine_tune_step, freeze,
                          centralized_step, quantized_point)
from .data import BatchStream, Dataset
from .errors import ConfigError, NumericError
from .metrics import MetricsRecord
from .net import (Architecture, Batch, ParamVector, backprop, ce_from_logits, ce_logit_grad, forward_pass,
                  init_params, kd_grad_teacher, kd_student_logit_grad, softmax)
from .quantizer import CenterVector, init_centers, levels_for_bits


@dataclass(frozen=True)
class ClientSpec:
    arch: Architecture
    bits: Optional[int] = 2            # None -> full precision
    seed: Optional[int] = None         # None -> derived from the run seed and client position


@dataclass(frozen=True)
class FederationConfig:
    clients: tuple
    global_arch: Architecture
    tau: int = 10
    T: int = 1000
    lambda_p: float = 0.25
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    eta1: float = 0.1
    eta1_decay: float = 0.99           # per epoch of the client's shard
    eta2: float = 1e-4
    eta2_drops: tuple = ()
    eta3: float = 0.5
    P: float = math.inf
    c_max: float = 10.0
    batch_size: int = 32
    fine_tune_epochs: int = 0
    eval_every: Optional[int] = None   # None -> tau
    seed: int = 0
    parallel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if len(self.clients) < 1:
            raise ConfigError("need at least one client")
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if self.T < self.tau:
            raise ConfigError(f"T must be >= tau, got T={self.T}, tau={self.tau}")
        if not 0 <= self.lambda_p <= 1:
            raise ConfigError(f"lambda_p must be in [0, 1], got {self.lambda_p}")
        if not (self.eta1 > 0 and self.eta2 > 0 and self.eta3 > 0):
            raise ConfigError("step sizes must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.fine_tune_epochs < 0:
            raise ConfigError("fine_tune_epochs must be >= 0")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        for spec in self.clients:
            if spec.arch.n_classes != self.global_arch.n_classes:
                raise ConfigError("client and global architectures disagree on the class count")
            if spec.arch.input_dim != self.global_arch.input_dim:
                raise ConfigError("client and global architectures disagree on the input dimension")

    @property
    def n(self) -> int:
        return len(self.clients)

    def client_seed(self, i: int) -> int:
        spec = self.clients[i]
        if spec.seed is not None:
            return int(spec.seed)
        return int(np.random.SeedSequence([int(self.seed), 1, i]).generate_state(1)[0])


@dataclass(frozen=True)
class ClientState:
    id: int
    local: CentralState                # x_i, c_i, local step count, schedule, eta1, eta2, mask
    w: np.ndarray                      # local copy of the global model
    eta3: float
    lambda_p: float

    @property
    def x(self) -> np.ndarray:
        return self.local.x

    @property
    def c(self) -> Optional[CenterVector]:
        return self.local.c


# ---------------------------------------------------------------------------
# objectives

def mixed_objective(arch: Architecture, batch: Batch, teacher_probs, lambda_p: float):
    """``(1 - lambda_p) * CE + lambda_p * KD(teacher_probs -> student)`` as a loss callable."""
    if lambda_p == 0 or teacher_probs is None:
        def f(values):
            logits, cache = forward_pass(arch, values, batch.inputs)
            return ce_from_logits(logits, batch.labels), backprop(arch, values, cache,
                                                                  ce_logit_grad(logits, batch.labels))
        return f

    teacher_logp = np.log(np.clip(teacher_probs, 1e-300, None))

    def f(values):
        logits, cache = forward_pass(arch, values, batch.inputs)
        ce = ce_from_logits(logits, batch.labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logq = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        kd = max(float((teacher_probs * (teacher_logp - logq)).sum(axis=1).mean()), 0.0)
        dlogits = ((1 - lambda_p) * ce_logit_grad(logits, batch.labels)
                   + lambda_p * kd_student_logit_grad(logits, teacher_probs))
        return (1 - lambda_p) * ce + lambda_p * kd, backprop(arch, values, cache, dlogits)
    return f


def _probs(arch, values, batch):
    return softmax(forward_pass(arch, values, batch.inputs)[0])


# ---------------------------------------------------------------------------
# steps

def client_local_step(cs: ClientState, batch: Batch, global_arch: Architecture) -> ClientState:
    """Alternating prox step on (x_i, c_i) then a distillation step on w_i.

    The penalty weight is ``cs.local.schedule(cs.local.t)``, i.e. indexed by
    the client's local step count.  With ``lambda_p == 0`` this is exactly
    :func:`centralized_step` on the client batch and ``w_i`` is untouched.
    """
    arch = cs.local.arch
    lp = cs.lambda_p
    teacher = _probs(global_arch, cs.w, batch) if lp > 0 else None
    f = mixed_objective(arch, batch, teacher, lp)
    try:
        local = centralized_step(cs.local, f)
    except NumericError as err:
        raise NumericError(f"client {cs.id}: {err}") from None
    if lp == 0:
        return replace(cs, local=local)

    w_params = ParamVector(cs.w, global_arch)
    grad_w = kd_grad_teacher(w_params, _probs(arch, local.x, batch), batch)
    if local.c is not None:
        xq = quantized_point(local.x, local.c, local.mask)
        grad_w = grad_w + kd_grad_teacher(w_params, _probs(arch, xq, batch), batch)
    w_new = cs.w - cs.eta3 * lp * grad_w
    if not np.all(np.isfinite(w_new)):
        raise NumericError(f"client {cs.id}: non-finite global copy at local step {cs.local.t}")
    return replace(cs, local=local, w=w_new)


def server_aggregate(w_list: Sequence) -> np.ndarray:
    """Elementwise mean of the clients' global copies.

    Values are sorted per coordinate before summing, so the result does not
    depend on client order down to the last bit.
    """
    if len(w_list) == 0:
        raise ConfigError("nothing to aggregate")
    arrays = []
    arch = None
    for w in w_list:
        if isinstance(w, ParamVector):
            if arch is not None and w.arch != arch:
                raise ConfigError("cannot average models with different architectures")
            arch = w.arch
            w = w.values
        arrays.append(np.asarray(w, dtype=np.float64))
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ConfigError("cannot average models with different architectures")
    stacked = np.sort(np.stack(arrays), axis=0)
    mean = stacked.sum(axis=0) / len(arrays)
    return ParamVector(mean, arch) if arch is not None else mean


# ---------------------------------------------------------------------------
# run loop

@dataclass
class FederatedResult:
    x_fp: list                        # per-client full-precision models at the end of the main phase
    x_hat: list                       # per-client hard-quantized (fine-tuned) models
    centers: list                     # per-client CenterVector or None
    w: Optional[np.ndarray]           # averaged global model
    metrics: list
    acc_fp: np.ndarray                # final per-client test accuracy, full precision
    acc_hard: np.ndarray              # final per-client test accuracy, hard-quantized

    @property
    def mean_acc_fp(self) -> float:
        return float(self.acc_fp.mean())

    @property
    def mean_acc_hard(self) -> float:
        return float(self.acc_hard.mean())


class _Client:
    """Mutable per-client bookkeeping around an immutable ClientState."""

    def __init__(self, state: ClientState, stream: BatchStream, train_batch: Batch, test_batch: Batch):
        self.state = state
        self.stream = stream
        self.train_batch = train_batch
        self.test_batch = test_batch


def _check_shards(cfg: FederationConfig, shards):
    if len(shards) != cfg.n:
        raise ConfigError(f"{len(shards)} shards for {cfg.n} clients")
    for i, sh in enumerate(shards):
        if len(sh.train) == 0 or len(sh.test) == 0:
            raise ConfigError(f"client {i} has an empty train or test shard")


def _make_clients(cfg: FederationConfig, ds: Dataset, shards, lambda_p: float, w0) -> list:
    _check_shards(cfg, shards)
    clients = []
    for i, (spec, shard) in enumerate(zip(cfg.clients, shards)):
        seed = cfg.client_seed(i)
        x0 = init_params(spec.arch, seed).values
        mask = spec.arch.mask_vector()
        c = None
        if spec.bits is not None and mask.any():
            c = init_centers(x0[mask], levels_for_bits(spec.bits), cfg.c_max, cfg.P)
        local = CentralState(x0, c, 0, cfg.schedule, cfg.eta1, cfg.eta2, mask, spec.arch)
        state = ClientState(i, local, None if w0 is None else w0.copy(), cfg.eta3, lambda_p)
        stream = BatchStream(ds, shard.train, cfg.batch_size, seed)
        clients.append(_Client(state, stream, ds.batch(shard.train), ds.batch(shard.test)))
    return clients


def _set_rates(cfg: FederationConfig, cl: _Client):
    k = cl.state.local.t
    epoch = k // cl.stream.steps_per_epoch
    local = replace(cl.state.local, eta1=eta_at(cfg.eta1, cfg.eta1_decay, epoch),
                    eta2=eta2_at(cfg.eta2, cfg.eta2_drops, epoch))
    cl.state = replace(cl.state, local=local, eta3=eta_at(cfg.eta3, cfg.eta1_decay, epoch))


def _local_step(cfg: FederationConfig, cl: _Client):
    _set_rates(cfg, cl)
    cl.state = client_local_step(cl.state, cl.stream.next(), cfg.global_arch)


def _client_objective(cfg, cl: _Client, batch: Batch):
    st = cl.state
    teacher = None
    if st.w is not None and st.lambda_p > 0:
        teacher = _probs(cfg.global_arch, st.w, batch)
    return mixed_objective(st.local.arch, batch, teacher, st.lambda_p)


def _eval_client(cfg, cl: _Client, step: int) -> MetricsRecord:
    f = _client_objective(cfg, cl, cl.train_batch)
    rec = evaluate(cl.state.local, cl.test_batch, cl.train_batch, cl.state.id, f)
    return replace(rec, step=step)


def _for_each(cfg: FederationConfig, pool, fn, clients):
    if pool is None:
        for cl in clients:
            fn(cl)
    else:
        # clients share no mutable state, so the schedule cannot change results
        list(pool.map(fn, clients))


def _run(cfg: FederationConfig, ds: Dataset, shards, lambda_p: float, communicate: bool) -> FederatedResult:
    w0 = init_params(cfg.global_arch, cfg.seed).values if communicate else None
    clients = _make_clients(cfg, ds, shards, lambda_p, w0)
    eval_every = cfg.eval_every or cfg.tau
    metrics = []
    pool = ThreadPoolExecutor(max_workers=cfg.n) if cfg.parallel else None
    try:
        for t in range(cfg.T):
            if t % eval_every == 0:
                metrics.extend(_eval_client(cfg, cl, t) for cl in clients)
            if t % cfg.tau == 0:
                if communicate:
                    w_mean = server_aggregate([cl.state.w for cl in clients])
                    for cl in clients:
                        cl.state = replace(cl.state, w=w_mean.copy())
                continue
            _for_each(cfg, pool, lambda cl: _local_step(cfg, cl), clients)
        metrics.extend(_eval_client(cfg, cl, cfg.T) for cl in clients)
        x_fp = [ParamVector(cl.state.x, cl.state.local.arch) for cl in clients]
        _for_each(cfg, pool, lambda cl: _fine_tune(cfg, cl), clients)
    finally:
        if pool is not None:
            pool.shutdown()

    if cfg.fine_tune_epochs > 0:
        end = cfg.T + cfg.fine_tune_epochs * max(cl.stream.steps_per_epoch for cl in clients)
        metrics.extend(_eval_client(cfg, cl, end) for cl in clients)

    x_hat, centers, acc_fp, acc_hard = [], [], [], []
    for cl, xf in zip(clients, x_fp):
        st = cl.state.local
        xh = st.x
        if st.c is not None:
            xh = freeze(st.x, st.c, st.mask).x
        x_hat.append(ParamVector(xh, st.arch))
        centers.append(st.c)
        acc_fp.append(_accuracy(st.arch, xf.values, cl.test_batch))
        acc_hard.append(_accuracy(st.arch, xh, cl.test_batch))
    w = server_aggregate([cl.state.w for cl in clients]) if communicate else None
    return FederatedResult(x_fp, x_hat, centers, w, metrics, np.array(acc_fp), np.array(acc_hard))


def _fine_tune(cfg: FederationConfig, cl: _Client):
    """Hard-quantize then train unmasked weights and centers; no-op for full precision clients."""
    st = cl.state.local
    if cfg.fine_tune_epochs == 0 or st.c is None:
        return
    fs = freeze(st.x, st.c, st.mask)
    spe = cl.stream.steps_per_epoch
    k0 = st.t
    for k in range(k0, k0 + cfg.fine_tune_epochs * spe):
        epoch = k // spe
        batch = cl.stream.next()
        f = _client_objective(cfg, cl, batch)
        fs = fine_tune_step(fs, f, eta_at(cfg.eta1, cfg.eta1_decay, epoch),
                            eta2_at(cfg.eta2, cfg.eta2_drops, epoch))
    cl.state = replace(cl.state, local=replace(st, x=fs.x, c=fs.c, t=k0 + cfg.fine_tune_epochs * spe))


def _accuracy(arch, values, batch) -> float:
    logits, _ = forward_pass(arch, values, batch.inputs)
    return float((logits.argmax(axis=1) == batch.labels).mean())


def run_quped(cfg: FederationConfig, ds: Dataset, shards) -> FederatedResult:
    return _run(cfg, ds, shards, cfg.lambda_p, communicate=True)


def run_local(cfg: FederationConfig, ds: Dataset, shards) -> FederatedResult:
    """Each client trains alone on its shard; ``lambda_p`` and the global model are ignored."""
    return _run(cfg, ds, shards, 0.0, communicate=False)


def run_fedavg(cfg: FederationConfig, ds: Dataset, shards) -> FederatedResult:
    """Local SGD on the global architecture with averaging every ``tau`` steps.

    Every client is evaluated with the averaged model; no quantization.
    """
    _check_shards(cfg, shards)
    garch = cfg.global_arch
    w0 = init_params(garch, cfg.seed).values
    clients = []
    for i, shard in enumerate(shards):
        stream = BatchStream(ds, shard.train, cfg.batch_size, cfg.client_seed(i))
        clients.append([w0.copy(), 0, stream, ds.batch(shard.train), ds.batch(shard.test)])
    eval_every = cfg.eval_every or cfg.tau
    metrics = []

    def log(t):
        w_mean = server_aggregate([cl[0] for cl in clients])
        for i, (_, _, _, train_b, test_b) in enumerate(clients):
            logits, _ = forward_pass(garch, w_mean, test_b.inputs)
            loss = ce_from_logits(logits, test_b.labels)
            acc = float((logits.argmax(axis=1) == test_b.labels).mean())
            tl, tc = forward_pass(garch, w_mean, train_b.inputs)
            g = backprop(garch, w_mean, tc, ce_logit_grad(tl, train_b.labels))
            metrics.append(MetricsRecord(t, i, loss, acc, loss, acc, float(g @ g), 0.0, 0.0))

    def sgd(cl):
        w, k, stream = cl[0], cl[1], cl[2]
        batch = stream.next()
        eta = eta_at(cfg.eta1, cfg.eta1_decay, k // stream.steps_per_epoch)
        logits, cache = forward_pass(garch, w, batch.inputs)
        w_new = w - eta * backprop(garch, w, cache, ce_logit_grad(logits, batch.labels))
        if not np.all(np.isfinite(w_new)):
            raise NumericError(f"client {clients.index(cl)}: non-finite weights at local step {k}")
        cl[0], cl[1] = w_new, k + 1

    for t in range(cfg.T):
        if t % eval_every == 0:
            log(t)
        if t % cfg.tau == 0:
            w_mean = server_aggregate([cl[0] for cl in clients])
            for cl in clients:
                cl[0] = w_mean.copy()
            continue
        for cl in clients:
            sgd(cl)
    log(cfg.T)
    w = server_aggregate([cl[0] for cl in clients])
    acc = np.array([_accuracy(garch, w, cl[4]) for cl in clients])
    x = [ParamVector(w, garch) for _ in clients]
    return FederatedResult(x, x, [None] * cfg.n, w, metrics, acc, acc.copy())


def steps_for_epochs(epochs: int, steps_per_epoch: int, tau: int) -> int:
    """Global step count giving every client ``epochs`` passes over its shard."""
    if tau == 1:
        raise ConfigError("tau = 1 leaves no local steps")
    # every tau-th global step is a sync step, so tau - 1 local steps per round
    rounds, rest = divmod(epochs * steps_per_epoch, tau - 1)
    return rounds * tau + (rest + 1 if rest else 0)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = "QUPED-CKPT 1"


def write_checkpoint(path, values, arch: Architecture, c: Optional[CenterVector], step: int) -> None:
    """Text header lines, a blank line, then little-endian float64 parameters and centers."""
    values = np.asarray(values, dtype="<f8")
    centers = np.asarray(c.centers if c is not None else [], dtype="<f8")
    P = c.P if c is not None else math.inf
    header = (f"{_CKPT_MAGIC}\narch={arch.describe()}\nm={centers.size}\nP={P!r}\n"
              f"step={step}\nn_params={values.size}\n\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(values.tobytes())
        fh.write(centers.tobytes())


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n\n")
    lines = head.decode("ascii").split("\n")
    if not sep or lines[0] != _CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    meta = dict(line.split("=", 1) for line in lines[1:])
    n, m = int(meta["n_params"]), int(meta["m"])
    if len(body) != 8 * (n + m):
        raise ConfigError(f"{path}: expected {8 * (n + m)} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return {"arch": Architecture.parse(meta["arch"]), "m": m, "P": float(meta["P"]),
            "step": int(meta["step"]), "values": arr[:n], "centers": arr[n:]}
