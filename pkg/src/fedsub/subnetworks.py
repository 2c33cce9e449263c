"""Activation masks and per-class subnetworks of a trained model.

Weight (i, j) of a layer counts as active for a sample when its input unit i
is nonzero and its output unit j fired (ReLU output > 0). Output units of the
softmax layer always count as fired.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import DenseLayer, EmptyDatasetError, ForwardTrace, Mlp, ShapeError, forward_traced


@dataclass(frozen=True)
class Depth:
    """Full depth (``layers is None``) or the first ``layers`` layers."""

    layers: Optional[int] = None

    @classmethod
    def full(cls) -> "Depth":
        return cls(None)

    @classmethod
    def partial(cls, layers: int = 2) -> "Depth":
        if layers < 1:
            raise ValueError("partial depth needs at least one layer")
        return cls(layers)

    def covered(self, model: Mlp) -> int:
        if self.layers is None:
            return len(model)
        if self.layers >= len(model):
            raise ValueError(f"partial depth {self.layers} must be below the layer count {len(model)}")
        return self.layers

    def __str__(self) -> str:
        return "full" if self.layers is None else f"partial:{self.layers}"


@dataclass(frozen=True)
class LayerMask:
    weights: np.ndarray
    biases: np.ndarray


@dataclass(frozen=True)
class Subnetwork:
    label: int
    values: tuple[DenseLayer, ...]
    mask: tuple[LayerMask, ...]
    freq: tuple[LayerMask, ...]
    support: int


def _fired(trace: ForwardTrace, layer: int) -> np.ndarray:
    out = trace.outputs[layer]
    if layer == len(trace) - 1:
        return np.ones_like(out, dtype=bool)
    return out > 0


def activation_map(model: Mlp, trace: ForwardTrace, depth: Depth) -> tuple[LayerMask, ...]:
    """Binary activation mask of one traced sample for the covered layers."""
    if len(trace) != len(model):
        raise ShapeError("trace does not come from this model")
    masks = []
    for l in range(depth.covered(model)):
        inp, out = trace.inputs[l], trace.outputs[l]
        layer = model.layers[l]
        if inp.shape != (1, layer.in_dim) or out.shape != (1, layer.out_dim):
            raise ShapeError(f"layer {l}: trace shapes {inp.shape}, {out.shape} do not match a single sample")
        active_in = (inp[0] != 0).astype(np.float64)
        active_out = _fired(trace, l)[0].astype(np.float64)
        masks.append(LayerMask(np.outer(active_in, active_out), active_out))
    return tuple(masks)


def _frequencies(model: Mlp, x: np.ndarray, n_layers: int) -> list[LayerMask]:
    _, trace = forward_traced(model, x)
    n = x.shape[0]
    freqs = []
    for l in range(n_layers):
        active_in = (trace.inputs[l] != 0).astype(np.float64)
        active_out = _fired(trace, l).astype(np.float64)
        # mean over samples of outer(in_active, out_active)
        freqs.append(LayerMask(active_in.T @ active_out / n, active_out.mean(axis=0)))
    return freqs


def extract_subnetworks(model: Mlp, x, y, depth: Depth) -> dict[int, Subnetwork]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyDatasetError("cannot extract subnetworks without samples")
    n_layers = depth.covered(model)
    out = {}
    for c in np.unique(y):
        xc = x[y == c]
        freqs = _frequencies(model, xc, n_layers)
        values, masks = [], []
        for layer, f in zip(model.layers, freqs):
            values.append(DenseLayer(layer.weights * f.weights, layer.biases * f.biases))
            masks.append(LayerMask((f.weights > 0).astype(np.float64), (f.biases > 0).astype(np.float64)))
        out[int(c)] = Subnetwork(int(c), tuple(values), tuple(masks), tuple(freqs), len(xc))
    return out


@dataclass(frozen=True)
class ClientUpdate:
    """New values for the covered layers; only elements flagged in
    ``replace`` overwrite the client's parameters."""

    client: str
    values: tuple[DenseLayer, ...]
    replace: tuple[LayerMask, ...]

    @property
    def is_empty(self) -> bool:
        return len(self.values) == 0


def apply_update(model: Mlp, update: ClientUpdate, depth: Depth) -> Mlp:
    if update.is_empty:
        return model
    n = depth.covered(model)
    if len(update.values) != n or len(update.replace) != n:
        raise ShapeError(f"update covers {len(update.values)} layers, depth covers {n}")
    layers = list(model.layers)
    for l in range(n):
        old, new, rep = layers[l], update.values[l], update.replace[l]
        if new.weights.shape != old.weights.shape or rep.weights.shape != old.weights.shape \
                or rep.biases.shape != old.biases.shape:
            raise ShapeError(f"layer {l}: update shape does not match the model")
        layers[l] = DenseLayer(
            np.where(rep.weights > 0, new.weights, old.weights),
            np.where(rep.biases > 0, new.biases, old.biases),
        )
    return Mlp(tuple(layers))
