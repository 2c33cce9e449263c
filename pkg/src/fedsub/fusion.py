"""Server-side fusion of cluster members' subnetworks into per-client updates.

Every fused cluster carries two score-weighted sums: one over the members'
subnetwork values (weight * activation frequency) and one over their
frequencies. Their ratio is the activation-weighted mean of the members'
weights, which is what finally lands in a client's model. A singleton
cluster therefore hands its member back its own weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .nn import DenseLayer, Mlp, ShapeError
from .subnetworks import ClientUpdate, Depth, LayerMask, Subnetwork


class FusionStrategy(str, Enum):
    CLUSTER_AVG = "cluster_avg"
    LEADERSHIP = "leadership"
    OVERLAPPING = "overlapping"


@dataclass(frozen=True)
class ClientScore:
    client: str
    label: int
    value: float


@dataclass(frozen=True)
class FusedCluster:
    values: tuple[DenseLayer, ...]
    freq: tuple[LayerMask, ...]
    mask: tuple[LayerMask, ...]


def score_clients(clients: Sequence[str], label: int, supports: Sequence[int],
                  strategy: FusionStrategy, accuracies: Sequence[float] | None = None) -> list[ClientScore]:
    """Member weights within one cluster, normalized to sum to one.

    Support-proportional for Cluster AVG and Overlapping; accuracy times
    support for Leadership. All-zero raw scores become uniform.
    """
    if not clients:
        raise ValueError("empty cluster")
    raw = np.asarray(supports, dtype=np.float64)
    if FusionStrategy(strategy) is FusionStrategy.LEADERSHIP:
        if accuracies is None:
            raise ValueError("leadership scoring needs per-class accuracies")
        raw = raw * np.asarray(accuracies, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("scores must be non-negative")
    total = raw.sum()
    norm = raw / total if total > 0 else np.full(len(raw), 1.0 / len(raw))
    return [ClientScore(c, label, float(v)) for c, v in zip(clients, norm)]


def _check_shapes(subnets: Sequence[Subnetwork]) -> None:
    if not subnets:
        raise ValueError("no subnetworks to fuse")
    ref = [(v.weights.shape, v.biases.shape) for v in subnets[0].values]
    for s in subnets[1:]:
        if [(v.weights.shape, v.biases.shape) for v in s.values] != ref:
            raise ShapeError("cluster members' subnetworks differ in shape")


def _weights(scores) -> np.ndarray:
    return np.array([s.value if isinstance(s, ClientScore) else float(s) for s in scores])


def _weighted(arrays: list[np.ndarray], p: np.ndarray) -> np.ndarray:
    return np.tensordot(p, np.stack(arrays), axes=1)


def fuse_cluster_avg(subnets: Sequence[Subnetwork], scores) -> FusedCluster:
    _check_shapes(subnets)
    p = _weights(scores)
    values, freq, mask = [], [], []
    for l in range(len(subnets[0].values)):
        vw = _weighted([s.values[l].weights for s in subnets], p)
        vb = _weighted([s.values[l].biases for s in subnets], p)
        fw = _weighted([s.freq[l].weights for s in subnets], p)
        fb = _weighted([s.freq[l].biases for s in subnets], p)
        values.append(DenseLayer(vw, vb))
        freq.append(LayerMask(fw, fb))
        mask.append(LayerMask((fw > 0).astype(np.float64), (fb > 0).astype(np.float64)))
    return FusedCluster(tuple(values), tuple(freq), tuple(mask))


def leader_index(clients: Sequence[str], scores) -> int:
    p = _weights(scores)
    best = p.max()
    tied = [i for i in range(len(p)) if p[i] == best]
    return min(tied, key=lambda i: clients[i])


def fuse_cluster_leadership(subnets: Sequence[Subnetwork], scores, clients: Sequence[str]) -> FusedCluster:
    _check_shapes(subnets)
    lead = subnets[leader_index(clients, scores)]
    return FusedCluster(lead.values, lead.freq, lead.mask)


def fuse_overlapping(subnets: Sequence[Subnetwork], scores) -> FusedCluster:
    """Score-weighted sum restricted to elements every member activated."""
    _check_shapes(subnets)
    p = _weights(scores)
    values, freq, mask = [], [], []
    for l in range(len(subnets[0].values)):
        ow = np.all(np.stack([s.mask[l].weights > 0 for s in subnets]), axis=0)
        ob = np.all(np.stack([s.mask[l].biases > 0 for s in subnets]), axis=0)
        vw = np.where(ow, _weighted([s.values[l].weights for s in subnets], p), 0.0)
        vb = np.where(ob, _weighted([s.values[l].biases for s in subnets], p), 0.0)
        fw = np.where(ow, _weighted([s.freq[l].weights for s in subnets], p), 0.0)
        fb = np.where(ob, _weighted([s.freq[l].biases for s in subnets], p), 0.0)
        values.append(DenseLayer(vw, vb))
        freq.append(LayerMask(fw, fb))
        mask.append(LayerMask(ow.astype(np.float64), ob.astype(np.float64)))
    return FusedCluster(tuple(values), tuple(freq), tuple(mask))


def fuse(strategy: FusionStrategy, subnets: Sequence[Subnetwork], scores,
         clients: Sequence[str]) -> FusedCluster:
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.CLUSTER_AVG:
        return fuse_cluster_avg(subnets, scores)
    if strategy is FusionStrategy.LEADERSHIP:
        return fuse_cluster_leadership(subnets, scores, clients)
    return fuse_overlapping(subnets, scores)


def _estimate(values: np.ndarray, freq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    active = freq > 0
    est = np.divide(values, freq, out=np.zeros_like(values), where=active)
    return est, active


def _cluster_mean(fused: Sequence[FusedCluster], l: int, part: str) -> tuple[np.ndarray, np.ndarray]:
    """Mean weight estimate over the clusters active at each element, and the
    boolean map of elements at least one cluster contributed to."""
    total, count = None, None
    for fc in fused:
        est, active = _estimate(getattr(fc.values[l], part), getattr(fc.freq[l], part))
        total = est if total is None else total + est
        count = active.astype(np.int64) if count is None else count + active
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return mean, count > 0


def region_norms(model: Mlp, update: ClientUpdate) -> list[tuple[float, float]]:
    """Norms of the client's current parameters over the elements the update replaces."""
    out = []
    for layer, rep in zip(model.layers, update.replace):
        out.append((float(np.linalg.norm(layer.weights[rep.weights > 0])),
                    float(np.linalg.norm(layer.biases[rep.biases > 0]))))
    return out


def normalize_layers(update: ClientUpdate, reference: Sequence[tuple[float, float]]) -> ClientUpdate:
    """Rescale the replaced elements of each layer back to the reference norms.

    Elements outside the replace mask are not touched; a zero-norm region is
    left as is.
    """
    if len(reference) != len(update.values):
        raise ShapeError("one reference norm pair per covered layer expected")
    values = []
    for new, rep, (ref_w, ref_b) in zip(update.values, update.replace, reference):
        w, b = new.weights.copy(), new.biases.copy()
        for arr, sel, ref in ((w, rep.weights > 0, ref_w), (b, rep.biases > 0, ref_b)):
            cur = np.linalg.norm(arr[sel])
            if cur > 0:
                arr[sel] *= ref / cur
        values.append(DenseLayer(w, b))
    return ClientUpdate(update.client, tuple(values), update.replace)


def own_activation_union(subnets: Sequence[Subnetwork]) -> tuple[LayerMask, ...]:
    subnets = list(subnets)
    if not subnets:
        return ()
    out = []
    for l in range(len(subnets[0].mask)):
        out.append(LayerMask(
            np.any(np.stack([s.mask[l].weights > 0 for s in subnets]), axis=0).astype(np.float64),
            np.any(np.stack([s.mask[l].biases > 0 for s in subnets]), axis=0).astype(np.float64),
        ))
    return tuple(out)


def assemble_client_update(client: str, fused: Sequence[FusedCluster], strategy: FusionStrategy,
                           model: Mlp, depth: Depth,
                           own_mask: Sequence[LayerMask] | None = None) -> ClientUpdate:
    """Combine the fused matrices of every cluster the client belongs to.

    Cluster AVG / Leadership replace each element some cluster contributed to
    with the mean of the clusters' weight estimates. Overlapping adds that
    mean to the client's own weight, only where the client itself was active,
    then restores the replaced region to its previous norm.
    """
    strategy = FusionStrategy(strategy)
    if not fused:
        return ClientUpdate(client, (), ())
    n = depth.covered(model)
    if any(len(fc.values) != n for fc in fused):
        raise ShapeError("fused clusters do not match the covered depth")
    values, replace = [], []
    for l in range(n):
        mw, hit_w = _cluster_mean(fused, l, "weights")
        mb, hit_b = _cluster_mean(fused, l, "biases")
        layer = model.layers[l]
        if mw.shape != layer.weights.shape:
            raise ShapeError(f"layer {l}: fused shape {mw.shape} vs model {layer.weights.shape}")
        if strategy is FusionStrategy.OVERLAPPING:
            if own_mask:
                hit_w = hit_w & (own_mask[l].weights > 0)
                hit_b = hit_b & (own_mask[l].biases > 0)
            else:
                hit_w = np.zeros_like(hit_w)
                hit_b = np.zeros_like(hit_b)
            mw = np.where(hit_w, layer.weights + mw, layer.weights)
            mb = np.where(hit_b, layer.biases + mb, layer.biases)
        values.append(DenseLayer(mw, mb))
        replace.append(LayerMask(hit_w.astype(np.float64), hit_b.astype(np.float64)))
    update = ClientUpdate(client, tuple(values), tuple(replace))
    if strategy is FusionStrategy.OVERLAPPING:
        update = normalize_layers(update, region_norms(model, update))
    return update
