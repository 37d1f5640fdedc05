"""Run configuration: a line-oriented ``key = value`` format with sections.

Example::

    # comments start with '#'
    [run]
    mode = quped
    seed = 0

    [data]
    dataset = synthetic

Sections only group keys; every key name is unique across sections, so keys
written before the first section header are accepted too.  A key under the
wrong section, an unknown key, a malformed value or an out-of-range value is a
:class:`~quped.errors.ConfigError` that names the line.  Every key and its
default is listed in ``FIELDS``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..errors import ConfigError

MODES = ("centralized", "quped", "fedavg", "local", "gradcheck", "proxcheck")
DATASETS = ("synthetic", "mnist")
LAMBDA_KINDS = ("linear", "linear_over_decay", "constant")
ACTIVATIONS = ("relu", "tanh")


def _bits(text):
    text = text.strip().lower()
    if text in ("full", "fp", "none"):
        return None
    v = int(text)
    if v not in (1, 2, 3, 4):
        raise ValueError("bits must be 1, 2, 3, 4 or full")
    return v


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text):
    v = float(text)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _int_list(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _bits_list(text):
    text = text.strip()
    return tuple(_bits(v) for v in text.split(",")) if text else ()


def _hidden_list(text):
    """Per-client hidden layers: ``32,32; 16; 64,64`` (clients separated by ';')."""
    text = text.strip()
    return tuple(_int_list(part) for part in text.split(";")) if text else ()


def _choice(options):
    def parse(text):
        v = text.strip()
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return parse


def _fmt_bits(b):
    return "full" if b is None else str(b)


# name: (section, parser, default, check, description)
FIELDS = {
    "mode": ("run", _choice(MODES), "quped", None, "what to run"),
    "seed": ("run", int, 0, lambda v: v >= 0, "global seed"),
    "out": ("run", str, "runs/out", None, "output directory for metrics.csv and checkpoints"),
    "eval_every": ("run", int, 0, lambda v: v >= 0, "evaluation interval in steps; 0 means tau"),
    "parallel": ("run", _bool, False, None, "run clients concurrently between barriers"),
    "check_cases": ("run", int, 100, lambda v: v >= 1, "cases for proxcheck"),
    "check_seeds": ("run", int, 20, lambda v: v >= 1, "seeds for gradcheck"),

    "dataset": ("data", _choice(DATASETS), "synthetic", None, "synthetic blobs or MNIST IDX files"),
    "data_dir": ("data", str, "", None, "MNIST directory; empty means $QUPED_DATA_DIR or ./data/mnist"),
    "classes": ("data", int, 6, lambda v: v >= 2, "synthetic class count K"),
    "dim": ("data", int, 2, lambda v: v >= 1, "synthetic feature dimension"),
    "per_class": ("data", int, 700, lambda v: v >= 1, "synthetic samples per class"),
    "spread": ("data", _float, 0.3, lambda v: v >= 0, "synthetic blob standard deviation"),
    "data_seed": ("data", int, -1, lambda v: v >= -1, "seed for data and partition; -1 means the run seed"),
    "n_clients": ("data", int, 8, lambda v: v >= 1, "number of clients"),
    "classes_per_client": ("data", int, 3, lambda v: v >= 1, "classes held by each client"),
    "train_per_client": ("data", int, 150, lambda v: v >= 1, "training samples per client"),
    "test_per_client": ("data", int, 50, lambda v: v >= 1, "test samples per client"),

    "hidden": ("model", _int_list, (32, 32), lambda v: all(h >= 1 for h in v), "hidden layer widths"),
    "activation": ("model", _choice(ACTIVATIONS), "relu", None, "hidden activation"),
    "bits": ("model", _bits, 2, None, "bit width of personalized models (1, 2, ... or full)"),
    "client_bits": ("model", _bits_list, (), None, "per-client bit widths; overrides bits"),
    "client_hidden": ("model", _hidden_list, (), None, "per-client hidden widths; overrides hidden"),
    "global_hidden": ("model", _int_list, (32, 32), lambda v: all(h >= 1 for h in v),
                      "hidden widths of the shared global model"),

    "epochs": ("train", int, 10, lambda v: v >= 1, "passes over each client's training shard"),
    "fine_tune_epochs": ("train", int, 0, lambda v: v >= 0, "epochs after hard quantization"),
    "batch_size": ("train", int, 16, lambda v: v >= 1, "mini-batch size"),
    "tau": ("train", int, 10, lambda v: v >= 2, "synchronization gap (needs room for local steps)"),
    "lambda_p": ("train", _float, 0.25, lambda v: 0 <= v <= 1, "weight of the distillation loss"),
    "lambda_kind": ("train", _choice(LAMBDA_KINDS), "linear", None, "penalty schedule"),
    "lambda_coef": ("train", _float, 5e-6, lambda v: v >= 0, "penalty schedule coefficient"),
    "lambda_decay": ("train", _float, 0.99, lambda v: 0 < v <= 1, "decay for linear_over_decay"),
    "eta1": ("train", _float, 0.1, lambda v: v > 0, "weight step size"),
    "eta1_decay": ("train", _float, 0.99, lambda v: 0 < v <= 1, "per-epoch decay of eta1 and eta3"),
    "eta2": ("train", _float, 1e-4, lambda v: v > 0, "center step size"),
    "eta2_drops": ("train", _int_list, (), lambda v: all(e >= 0 for e in v), "epochs where eta2 drops 10x"),
    "eta3": ("train", _float, 0.5, lambda v: v > 0, "global-copy step size"),
    "P": ("train", _float, math.inf, lambda v: v > 0, "soft quantizer sharpness; inf is hard mode"),
    "c_max": ("train", _float, 10.0, lambda v: v > 0, "bound on center magnitude"),
}

SECTIONS = ("run", "data", "model", "train")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "quped"
    seed: int = 0
    out: str = "runs/out"
    eval_every: int = 0
    parallel: bool = False
    check_cases: int = 100
    check_seeds: int = 20
    dataset: str = "synthetic"
    data_dir: str = ""
    classes: int = 6
    dim: int = 2
    per_class: int = 700
    spread: float = 0.3
    data_seed: int = -1
    n_clients: int = 8
    classes_per_client: int = 3
    train_per_client: int = 150
    test_per_client: int = 50
    hidden: tuple = (32, 32)
    activation: str = "relu"
    bits: object = 2
    client_bits: tuple = ()
    client_hidden: tuple = ()
    global_hidden: tuple = (32, 32)
    epochs: int = 10
    fine_tune_epochs: int = 0
    batch_size: int = 16
    tau: int = 10
    lambda_p: float = 0.25
    lambda_kind: str = "linear"
    lambda_coef: float = 5e-6
    lambda_decay: float = 0.99
    eta1: float = 0.1
    eta1_decay: float = 0.99
    eta2: float = 1e-4
    eta2_drops: tuple = ()
    eta3: float = 0.5
    P: float = math.inf
    c_max: float = 10.0

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed < 0 else self.data_seed


assert set(FIELDS) == {f.name for f in fields(RunConfig)}
assert all(FIELDS[f.name][2] == f.default for f in fields(RunConfig))


def _check_cross(cfg: RunConfig, line_of: dict):
    def err(key, msg):
        raise ConfigError(msg, line_of.get(key))
    if cfg.client_bits and len(cfg.client_bits) != cfg.n_clients:
        err("client_bits", f"client_bits lists {len(cfg.client_bits)} entries for {cfg.n_clients} clients")
    if cfg.client_hidden and len(cfg.client_hidden) != cfg.n_clients:
        err("client_hidden", f"client_hidden lists {len(cfg.client_hidden)} entries for {cfg.n_clients} clients")
    if cfg.dataset == "synthetic" and cfg.classes_per_client > cfg.classes:
        err("classes_per_client", f"classes_per_client={cfg.classes_per_client} exceeds classes={cfg.classes}")
    if cfg.dataset == "mnist" and cfg.classes_per_client > 10:
        err("classes_per_client", "MNIST has 10 classes")


def set_value(cfg: RunConfig, key: str, text: str, line=None) -> RunConfig:
    if key not in FIELDS:
        raise ConfigError(f"unknown key {key!r}", line)
    _, parse, _, check, _ = FIELDS[key]
    try:
        value = parse(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r} ({e})", line) from None
    if check is not None and not check(value):
        raise ConfigError(f"{key}={text.strip()} is out of range ({FIELDS[key][4]})", line)
    return replace(cfg, **{key: value})


def parse_config_text(text: str, overrides: dict = None) -> RunConfig:
    cfg = RunConfig()
    section = None
    line_of = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if section is not None and FIELDS[key][0] != section:
            raise ConfigError(f"key {key!r} belongs in [{FIELDS[key][0]}], not [{section}]", lineno)
        if key in line_of:
            raise ConfigError(f"duplicate key {key!r} (first set on line {line_of[key]})", lineno)
        cfg = set_value(cfg, key, value, lineno)
        line_of[key] = lineno
    for key, value in (overrides or {}).items():
        cfg = set_value(cfg, key, str(value))
    _check_cross(cfg, line_of)
    return cfg


def parse_config(path=None, overrides: dict = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config_text(text, overrides)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if value == math.inf else repr(value)
    if value is None:
        return "full"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(str(h) for h in part) for part in value)
        return ",".join(_fmt_bits(v) if v is None else str(v) for v in value)
    return str(value)


def serialize(cfg: RunConfig) -> str:
    out = []
    for section in SECTIONS:
        out.append(f"[{section}]")
        for key, (sec, _, _, _, doc) in FIELDS.items():
            if sec == section:
                out.append(f"{key} = {_fmt(getattr(cfg, key))}")
        out.append("")
    return "\n".join(out)


def describe_fields() -> str:
    """Table of every key, its section, default and meaning (used by --help-config)."""
    rows = []
    for key, (section, _, default, _, doc) in FIELDS.items():
        rows.append(f"[{section}] {key} = {_fmt(default)}    {doc}")
    return "\n".join(rows)
