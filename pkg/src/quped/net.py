"""Small feedforward classifier with hand-written backprop.

Parameters live in one flat float64 vector.  Each layer contributes a weight
block of shape ``(fan_in, fan_out)`` followed by a bias block of length
``fan_out``; blocks are laid out in that order, layer after layer.

The public operations (``forward``, ``ce_loss_and_grad``, ``kd_loss``,
``kd_grad_student``, ``kd_grad_teacher``) take :class:`ParamVector` and
:class:`Batch` objects.  Training loops that need several gradients from one
forward pass use the lower-level ``forward_pass`` / ``backprop`` pair together
with the logit-gradient helpers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple
    activation: str = "relu"
    # One flag per parameter block (W1, b1, W2, b2, ...). None -> default mask.
    quant_mask: Optional[tuple] = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"layer_sizes must have >= 2 positive entries, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        n_blocks = 2 * (len(sizes) - 1)
        if self.quant_mask is None:
            object.__setattr__(self, "quant_mask", default_quant_mask(sizes))
        else:
            mask = tuple(bool(b) for b in self.quant_mask)
            if len(mask) != n_blocks:
                raise ConfigError(f"quant_mask needs {n_blocks} entries, got {len(mask)}")
            object.__setattr__(self, "quant_mask", mask)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def block_shapes(self) -> list:
        shapes = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append((fan_out,))
        return shapes

    @property
    def block_slices(self) -> list:
        slices, start = [], 0
        for shape in self.block_shapes:
            size = int(np.prod(shape))
            slices.append(slice(start, start + size))
            start += size
        return slices

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.block_shapes)

    def mask_vector(self) -> np.ndarray:
        """Boolean array over all parameters; True where quantized."""
        mask = np.zeros(self.n_params, dtype=bool)
        for sl, flag in zip(self.block_slices, self.quant_mask):
            mask[sl] = flag
        return mask

    def describe(self) -> str:
        sizes = "-".join(str(s) for s in self.layer_sizes)
        mask = "".join("1" if b else "0" for b in self.quant_mask)
        return f"{sizes}:{self.activation}:{mask}"

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        """Inverse of :meth:`describe`; the activation and mask parts are optional."""
        parts = text.strip().split(":")
        try:
            sizes = tuple(int(s) for s in parts[0].split("-"))
        except ValueError:
            raise ConfigError(f"bad architecture string {text!r}") from None
        activation = parts[1] if len(parts) > 1 and parts[1] else "relu"
        mask = None
        if len(parts) > 2 and parts[2]:
            if set(parts[2]) - {"0", "1"}:
                raise ConfigError(f"bad quant mask in {text!r}")
            mask = tuple(ch == "1" for ch in parts[2])
        return cls(sizes, activation, mask)


def default_quant_mask(layer_sizes: Sequence[int]) -> tuple:
    """First and last weight matrices stay full precision, as do all biases."""
    n_layers = len(layer_sizes) - 1
    mask = []
    for layer in range(n_layers):
        mask.append(0 < layer < n_layers - 1)
        mask.append(False)
    return tuple(mask)


@dataclass
class ParamVector:
    values: np.ndarray
    arch: Architecture

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.arch.n_params:
            raise ConfigError(
                f"parameter vector has shape {self.values.shape}, "
                f"architecture {self.arch.describe()} needs ({self.arch.n_params},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("parameter vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.arch)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.arch)

    def layers(self):
        """Yield ``(W, b)`` views per layer."""
        sl = self.arch.block_slices
        shapes = self.arch.block_shapes
        for i in range(self.arch.n_layers):
            W = self.values[sl[2 * i]].reshape(shapes[2 * i])
            b = self.values[sl[2 * i + 1]]
            yield W, b


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ConfigError(f"batch inputs must be a non-empty matrix, got {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ConfigError("labels must have one entry per input row")

    def __len__(self):
        return self.inputs.shape[0]


def init_params(arch: Architecture, seed) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    values = np.empty(arch.n_params)
    for i, fan_in in enumerate(arch.layer_sizes[:-1]):
        # the bias shares its layer's bound
        bound = 1.0 / np.sqrt(fan_in)
        for sl in arch.block_slices[2 * i: 2 * i + 2]:
            values[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    return ParamVector(values, arch)


# ---------------------------------------------------------------------------
# raw forward / backward on flat arrays

def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    return 1.0 - a * a


def _check_inputs(arch: Architecture, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ConfigError(f"inputs of shape {X.shape} do not match input dim {arch.input_dim}")


def forward_pass(arch: Architecture, values: np.ndarray, X: np.ndarray):
    """Return ``(logits, cache)``; the cache feeds :func:`backprop`."""
    _check_inputs(arch, X)
    sl = arch.block_slices
    shapes = arch.block_shapes
    h = X
    cache = []
    for i in range(arch.n_layers):
        W = values[sl[2 * i]].reshape(shapes[2 * i])
        b = values[sl[2 * i + 1]]
        z = h @ W + b
        if i < arch.n_layers - 1:
            a = _act(z, arch.activation)
        else:
            a = z
        cache.append((h, z, a))
        h = a
    return h, cache


def backprop(arch: Architecture, values: np.ndarray, cache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flat parameters given d(loss)/d(logits)."""
    sl = arch.block_slices
    shapes = arch.block_shapes
    grad = np.empty(arch.n_params)
    delta = dlogits
    for i in reversed(range(arch.n_layers)):
        h_in, z, a = cache[i]
        if i < arch.n_layers - 1:
            delta = delta * _act_grad(z, a, arch.activation)
        grad[sl[2 * i]] = (h_in.T @ delta).ravel()
        grad[sl[2 * i + 1]] = delta.sum(axis=0)
        if i > 0:
            W = values[sl[2 * i]].reshape(shapes[2 * i])
            delta = delta @ W.T
    return grad


# ---------------------------------------------------------------------------
# softmax and losses on logits

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ce_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def ce_logit_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def kd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray) -> float:
    """Batch mean of KL(softmax(teacher) || softmax(student)), temperature 1."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_logits = np.asarray(student_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise ConfigError("teacher and student logits must have the same shape")
    logp = log_softmax(teacher_logits)
    logq = log_softmax(student_logits)
    kl = (np.exp(logp) * (logp - logq)).sum(axis=1)
    # roundoff can leave tiny negatives when both distributions coincide
    return float(max(kl.mean(), 0.0))


def kd_student_logit_grad(student_logits: np.ndarray, teacher_probs: np.ndarray) -> np.ndarray:
    return (softmax(student_logits) - teacher_probs) / student_logits.shape[0]


def kd_teacher_logit_grad(teacher_logits: np.ndarray, student_probs: np.ndarray) -> np.ndarray:
    """d/d(teacher logits) of mean KL(softmax(teacher) || student_probs).

    Per row, with v_k = log p_k - log q_k, the derivative is p_j (v_j - KL).
    """
    logp = log_softmax(teacher_logits)
    p = np.exp(logp)
    v = logp - np.log(student_probs)
    kl = (p * v).sum(axis=1, keepdims=True)
    return p * (v - kl) / teacher_logits.shape[0]


# ---------------------------------------------------------------------------
# public operations

def forward(params: ParamVector, batch: Batch) -> np.ndarray:
    logits, _ = forward_pass(params.arch, params.values, batch.inputs)
    return logits


def ce_loss_and_grad(params: ParamVector, batch: Batch):
    logits, cache = forward_pass(params.arch, params.values, batch.inputs)
    _check_labels(params.arch, batch)
    loss = ce_from_logits(logits, batch.labels)
    grad = backprop(params.arch, params.values, cache, ce_logit_grad(logits, batch.labels))
    return loss, grad


def kd_grad_student(student_params: ParamVector, teacher_probs: np.ndarray, batch: Batch) -> np.ndarray:
    logits, cache = forward_pass(student_params.arch, student_params.values, batch.inputs)
    _check_probs(teacher_probs, logits.shape)
    return backprop(student_params.arch, student_params.values, cache,
                    kd_student_logit_grad(logits, teacher_probs))


def kd_grad_teacher(teacher_params: ParamVector, student_probs: np.ndarray, batch: Batch) -> np.ndarray:
    logits, cache = forward_pass(teacher_params.arch, teacher_params.values, batch.inputs)
    _check_probs(student_probs, logits.shape)
    return backprop(teacher_params.arch, teacher_params.values, cache,
                    kd_teacher_logit_grad(logits, student_probs))


def accuracy(params: ParamVector, batch: Batch) -> float:
    return float((forward(params, batch).argmax(axis=1) == batch.labels).mean())


def _check_labels(arch, batch):
    if batch.labels is None:
        raise ConfigError("batch has no labels")
    if batch.labels.min() < 0 or batch.labels.max() >= arch.n_classes:
        raise ConfigError(f"labels must lie in [0, {arch.n_classes})")


def _check_probs(probs, shape):
    probs = np.asarray(probs)
    if probs.shape != shape:
        raise ConfigError(f"probability matrix has shape {probs.shape}, expected {shape}")
