"""Dense softmax classifiers on flat float64 parameter vectors.

A model is softmax regression when ``Architecture.hidden`` is empty, otherwise
an MLP with tanh hidden units. Parameters live in one flat vector laid out
layer by layer as ``W`` (fan_in x fan_out, row-major) followed by ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from dvwfed.errors import InputError, NumericError


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...] = ()
    num_classes: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise InputError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden):
            raise InputError(f"hidden sizes must be positive, got {self.hidden}")
        if self.num_classes < 2:
            raise InputError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_sizes)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "num_classes": self.num_classes}


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable flat parameter vector tied to its architecture."""

    values: np.ndarray
    arch: Architecture

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.size != self.arch.num_params:
            raise InputError(
                f"expected {self.arch.num_params} parameters for {self.arch}, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("model parameters contain NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split into per-layer ``(W, b)`` views."""
        out = []
        offset = 0
        for fan_in, fan_out in self.arch.layer_sizes:
            w = self.values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def same_as(self, other: ModelParams) -> bool:
        return self.arch == other.arch and np.array_equal(self.values, other.values)


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Draw weights from N(0, 1/fan_in); biases start at zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layer_sizes:
        chunks.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(np.concatenate(chunks), arch)


def _check_features(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise InputError(
            f"feature matrix has shape {x.shape}, model expects {params.arch.input_dim} columns"
        )
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(params: ModelParams, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    activations = [x]
    layers = params.layers()
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        activations.append(h)
    w, b = layers[-1]
    return activations, h @ w + b


def logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = _check_features(params, features)
    return _forward_pass(params, x)[1]


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Class-probability matrix, one row per input row."""
    return _softmax(logits(params, features))


def loss_and_grad(params: ModelParams, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``params.values``."""
    x = _check_features(params, batch.features)
    y = np.asarray(batch.labels)
    if y.ndim != 1 or y.shape[0] != x.shape[0] or y.shape[0] == 0:
        raise InputError(f"batch has {x.shape[0]} rows but {y.shape} labels")
    c = params.arch.num_classes
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= c:
        raise InputError(f"labels must be integers in [0, {c})")

    n = x.shape[0]
    activations, z = _forward_pass(params, x)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, y]))

    delta = np.exp(z - log_norm[:, None])
    delta[rows, y] -= 1.0
    delta /= n

    layers = params.layers()
    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a = activations[i]
        grads.append(delta.sum(axis=0))
        grads.append((a.T @ delta).reshape(-1))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - a * a)
    grads.reverse()
    return loss, np.concatenate(grads)


def sgd_step(params: ModelParams, grad: Sequence[float] | np.ndarray, eta: float) -> ModelParams:
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape:
        raise InputError(f"gradient length {g.size} does not match {params.values.size} parameters")
    if not eta > 0:
        raise InputError(f"learning rate must be positive, got {eta}")
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains NaN or Inf")
    return ModelParams(params.values - eta * g, params.arch)
