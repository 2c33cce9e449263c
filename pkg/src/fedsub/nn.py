"""Small dense network engine: ReLU hidden layers, softmax output, SGD.

Everything is float64 numpy. Models are treated as immutable values; training
returns a fresh model and never touches its input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the model."""


class EmptyDatasetError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    biases: np.ndarray  # (out_dim,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
            raise ShapeError(f"bad layer shapes: weights {w.shape}, biases {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class Mlp:
    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) < 1:
            raise ShapeError("model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __len__(self) -> int:
        return len(self.layers)

    def copy(self) -> "Mlp":
        return Mlp(tuple(DenseLayer(l.weights.copy(), l.biases.copy()) for l in self.layers))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weights.ravel(), l.biases]) for l in self.layers])

    def equals(self, other: "Mlp") -> bool:
        """Bitwise parameter equality."""
        if len(self) != len(other):
            return False
        return all(
            np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)
            for a, b in zip(self.layers, other.layers)
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 1
    batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ForwardTrace:
    """Per-layer inputs and post-activation outputs.

    Arrays are 2-D (samples, units). The last output is the softmax
    probability matrix.
    """

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class Evaluation:
    macro_f1: float
    mean_loss: float
    per_class_accuracy: dict[int, float]


def init_mlp(sizes: Sequence[int], seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(w, np.zeros(fan_out)))
    return Mlp(tuple(layers))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _as_batch(model: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"expected inputs of length {model.in_dim}, got shape {x.shape}")
    return x, single


def _logits(model: Mlp, x: np.ndarray) -> np.ndarray:
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = h @ layer.weights + layer.biases
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def forward(model: Mlp, x) -> np.ndarray:
    """Class probabilities for one sample (1-D) or a batch (2-D)."""
    xb, single = _as_batch(model, x)
    p = softmax(_logits(model, xb))
    return p[0] if single else p


def forward_traced(model: Mlp, x) -> tuple[np.ndarray, ForwardTrace]:
    xb, single = _as_batch(model, x)
    trace = ForwardTrace()
    h = xb
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        trace.inputs.append(h)
        z = h @ layer.weights + layer.biases
        h = np.maximum(z, 0.0) if i < last else softmax(z)
        trace.outputs.append(h)
    return (h[0] if single else h), trace


def _check_labels(model: Mlp, x: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y)
    if x.shape[0] == 0 or y.size == 0:
        raise EmptyDatasetError("no samples")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} samples but labels of shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= model.out_dim:
        raise LabelError(f"labels must lie in [0, {model.out_dim})")
    return y


def _prepare(model: Mlp, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == 0:
        raise EmptyDatasetError("no samples")
    xb, _ = _as_batch(model, x)
    return xb, _check_labels(model, xb, y)


def loss(model: Mlp, x, y) -> float:
    """Mean cross-entropy."""
    xb, yb = _prepare(model, x, y)
    logp = _log_softmax(_logits(model, xb))
    return float(-np.mean(logp[np.arange(len(yb)), yb]))


def _backprop(weights: list[np.ndarray], biases: list[np.ndarray], x: np.ndarray,
              y: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    activations = [x]
    h = x
    last = len(weights) - 1
    for i in range(last + 1):
        z = h @ weights[i] + biases[i]
        h = np.maximum(z, 0.0) if i < last else softmax(z)
        activations.append(h)
    n = x.shape[0]
    delta = activations[-1].copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for i in range(last, -1, -1):
        a_in = activations[i]
        grads.append((a_in.T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ weights[i].T) * (activations[i] > 0)
    grads.reverse()
    return grads


def gradient(model: Mlp, x, y) -> Mlp:
    """Gradient of the mean cross-entropy, in the same shape as the model."""
    xb, yb = _prepare(model, x, y)
    grads = _backprop([l.weights for l in model.layers], [l.biases for l in model.layers], xb, yb)
    return Mlp(tuple(DenseLayer(gw, gb) for gw, gb in grads))


def train_sgd(model: Mlp, x, y, cfg: TrainConfig) -> Mlp:
    """Mini-batch SGD with a per-epoch reshuffle drawn from cfg.rng_seed."""
    xb, yb = _prepare(model, x, y)
    weights = [l.weights.copy() for l in model.layers]
    biases = [l.biases.copy() for l in model.layers]
    if cfg.learning_rate == 0:
        return Mlp(tuple(DenseLayer(w, b) for w, b in zip(weights, biases)))
    rng = np.random.default_rng(cfg.rng_seed)
    n = xb.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for k, (gw, gb) in enumerate(_backprop(weights, biases, xb[idx], yb[idx])):
                weights[k] = weights[k] - cfg.learning_rate * gw
                biases[k] = biases[k] - cfg.learning_rate * gb
    return Mlp(tuple(DenseLayer(w, b) for w, b in zip(weights, biases)))


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean F1 over the classes present in y_true.

    A true class that is never predicted scores 0. Classes that only appear in
    the predictions are left out of the average.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for c in np.unique(y_true):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def evaluate(model: Mlp, x, y) -> Evaluation:
    xb, yb = _prepare(model, x, y)
    logits = _logits(model, xb)
    logp = _log_softmax(logits)
    mean_loss = float(-np.mean(logp[np.arange(len(yb)), yb]))
    pred = np.argmax(logits, axis=1)
    per_class = {int(c): float(np.mean(pred[yb == c] == c)) for c in np.unique(yb)}
    return Evaluation(macro_f1(yb, pred), mean_loss, per_class)
