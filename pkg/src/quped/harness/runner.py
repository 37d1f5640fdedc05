"""Builds experiments from a RunConfig and writes their outputs."""
from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..centralized import CentralConfig, LambdaSchedule, train_centralized
from ..data import Dataset, PartitionSpec, gen_synthetic, partition_heterogeneous
from ..errors import ConfigError, FeasibilityError, IDXFormatError, NumericError
from ..federated import (ClientSpec, FederatedResult, FederationConfig, run_fedavg, run_local, run_quped,
                         steps_for_epochs, write_checkpoint)
from ..metrics import write_csv
from ..net import Architecture
from . import checks
from .config import RunConfig, serialize
from .mnist import load_mnist

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


@dataclass
class Experiment:
    ds: Dataset
    shards: list
    fed: FederationConfig
    central: CentralConfig


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "mnist":
        return load_mnist(cfg.data_dir)
    return gen_synthetic(cfg.classes, cfg.dim, cfg.per_class, cfg.spread, cfg.effective_data_seed)


def client_archs(cfg: RunConfig, dim: int, K: int) -> list:
    hidden = cfg.client_hidden or (cfg.hidden,) * cfg.n_clients
    return [Architecture((dim, *h, K), cfg.activation) for h in hidden]


def build(cfg: RunConfig) -> Experiment:
    ds = load_dataset(cfg)
    spec = PartitionSpec(cfg.n_clients, cfg.classes_per_client, cfg.train_per_client, cfg.test_per_client,
                         cfg.effective_data_seed)
    shards = partition_heterogeneous(ds, spec)
    archs = client_archs(cfg, ds.dim, ds.K)
    bits = cfg.client_bits or (cfg.bits,) * cfg.n_clients
    garch = Architecture((ds.dim, *cfg.global_hidden, ds.K), cfg.activation)
    schedule = LambdaSchedule(cfg.lambda_kind, cfg.lambda_coef, cfg.lambda_decay)
    spe = -(-cfg.train_per_client // cfg.batch_size)
    fed = FederationConfig(
        clients=tuple(ClientSpec(a, b) for a, b in zip(archs, bits)), global_arch=garch, tau=cfg.tau,
        T=steps_for_epochs(cfg.epochs, spe, cfg.tau), lambda_p=cfg.lambda_p, schedule=schedule,
        eta1=cfg.eta1, eta1_decay=cfg.eta1_decay, eta2=cfg.eta2, eta2_drops=cfg.eta2_drops, eta3=cfg.eta3,
        P=cfg.P, c_max=cfg.c_max, batch_size=cfg.batch_size, fine_tune_epochs=cfg.fine_tune_epochs,
        eval_every=cfg.eval_every or None, seed=cfg.seed, parallel=cfg.parallel)
    central = CentralConfig(
        arch=archs[0], bits=bits[0], P=cfg.P, c_max=cfg.c_max, eta1=cfg.eta1, eta1_decay=cfg.eta1_decay,
        eta2=cfg.eta2, eta2_drops=cfg.eta2_drops, schedule=schedule, epochs=cfg.epochs,
        fine_tune_epochs=cfg.fine_tune_epochs, batch_size=cfg.batch_size, seed=cfg.seed)
    return Experiment(ds, shards, fed, central)


def run_experiment(cfg: RunConfig, exp: Experiment = None):
    """Run a training mode; returns ``(metrics, result)``."""
    exp = exp or build(cfg)
    if cfg.mode == "centralized":
        train = np.concatenate([s.train for s in exp.shards])
        test = np.concatenate([s.test for s in exp.shards])
        test_ds = Dataset(exp.ds.features[test], exp.ds.labels[test], exp.ds.K)
        res = train_centralized(exp.central, exp.ds, test_ds, indices=train)
        return res.metrics, res
    runner = {"quped": run_quped, "local": run_local, "fedavg": run_fedavg}[cfg.mode]
    res = runner(exp.fed, exp.ds, exp.shards)
    return res.metrics, res


def _write_outputs(cfg: RunConfig, metrics, res, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    write_csv(metrics, out / "metrics.csv")
    (out / "config.txt").write_text(serialize(cfg))
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    if isinstance(res, FederatedResult):
        step = metrics[-1].step
        for i, (xh, c) in enumerate(zip(res.x_hat, res.centers)):
            write_checkpoint(ck / f"client_{i}.ckpt", xh.values, xh.arch, c, step)
        if res.w is not None:
            write_checkpoint(ck / "global.ckpt", res.w, build_global_arch(cfg, res), None, step)
    else:
        write_checkpoint(ck / "central.ckpt", res.x_hard.values, res.x_hard.arch, res.c_final,
                         metrics[-1].step)


def build_global_arch(cfg: RunConfig, res: FederatedResult) -> Architecture:
    arch0 = res.x_hat[0].arch
    return Architecture((arch0.input_dim, *cfg.global_hidden, arch0.n_classes), cfg.activation)


def _summary(cfg: RunConfig, res) -> str:
    if isinstance(res, FederatedResult):
        return (f"{cfg.mode}: mean test accuracy full precision {res.mean_acc_fp:.4f}, "
                f"hard-quantized {res.mean_acc_hard:.4f} over {len(res.acc_fp)} clients")
    last = res.metrics[-1]
    return f"centralized: test accuracy full precision {last.acc_fp:.4f}, hard-quantized {last.acc_hard:.4f}"


def run(cfg: RunConfig, stdout=None, stderr=None) -> int:
    """Dispatch on ``cfg.mode``; returns the process exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        if cfg.mode == "gradcheck":
            worst = checks.gradcheck(cfg.check_seeds)
            ok = True
            for name, err in worst.items():
                flag = "ok" if err <= checks.GRAD_TOL else "FAIL"
                ok &= err <= checks.GRAD_TOL
                print(f"{name:18s} max_rel_err={err:.3e} {flag}", file=stdout)
            return EXIT_OK if ok else EXIT_CHECK
        if cfg.mode == "proxcheck":
            gap, res = checks.proxcheck(cfg.check_cases, cfg.seed)
            ok = gap <= res
            print(f"prox_x vs grid oracle: {cfg.check_cases} cases, max gap {gap:.3e}, "
                  f"resolution {res:.1e} {'ok' if ok else 'FAIL'}", file=stdout)
            return EXIT_OK if ok else EXIT_CHECK
        metrics, res = run_experiment(cfg)
        _write_outputs(cfg, metrics, res, Path(cfg.out))
        print(_summary(cfg, res), file=stdout)
        print(f"wrote {Path(cfg.out) / 'metrics.csv'}", file=stdout)
        return EXIT_OK
    except (ConfigError, FeasibilityError, IDXFormatError) as e:
        print(f"configuration error: {e}", file=stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=stderr)
        return EXIT_NUMERIC
