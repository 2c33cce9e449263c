"""Class prototypes, prototype-based client similarity and collaborative
filtering of missing prototypes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .nn import EmptyDatasetError

log = logging.getLogger(__name__)

COMPUTED = "computed"
PREDICTED = "predicted"


@dataclass(frozen=True)
class Prototype:
    label: int
    vector: np.ndarray
    provenance: str = COMPUTED


@dataclass
class PrototypeSet:
    client: str
    entries: dict[int, Prototype] = field(default_factory=dict)

    def computed(self) -> dict[int, np.ndarray]:
        return {y: p.vector for y, p in self.entries.items() if p.provenance == COMPUTED}

    def labels(self) -> set[int]:
        return set(self.entries)


def compute_prototypes(x, y, client: str = "") -> PrototypeSet:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyDatasetError("cannot compute prototypes without samples")
    entries = {int(c): Prototype(int(c), x[y == c].mean(axis=0)) for c in np.unique(y)}
    return PrototypeSet(client, entries)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def client_similarity(a: PrototypeSet, b: PrototypeSet) -> float:
    """Mean cosine similarity over labels both clients computed prototypes for."""
    pa, pb = a.computed(), b.computed()
    shared = sorted(set(pa) & set(pb))
    if not shared:
        return 0.0
    return float(np.mean([_cosine(pa[y], pb[y]) for y in shared]))


def similarity_table(sets: Sequence[PrototypeSet]) -> np.ndarray:
    n = len(sets)
    s = np.eye(n)
    for i in range(n):
        if not sets[i].computed():
            s[i, i] = 0.0
        for j in range(i + 1, n):
            s[i, j] = s[j, i] = client_similarity(sets[i], sets[j])
    return s


def predict_missing_prototypes(sets: Sequence[PrototypeSet], label_universe: Iterable[int],
                               n: int = 3) -> list[PrototypeSet]:
    """Fill each client's missing labels with a similarity-weighted average of
    the prototypes held by its ``n`` most similar donors.

    Donors are clients with a computed prototype for the label and a positive
    similarity. With no positive donor the unweighted mean of all donors is
    used; a label nobody holds stays missing.
    """
    if n < 1:
        raise ValueError("neighbour count must be >= 1")
    sim = similarity_table(sets)
    computed = [s.computed() for s in sets]
    out = []
    for u, pset in enumerate(sets):
        entries = dict(pset.entries)
        for y in label_universe:
            if y in entries:
                continue
            donors = [v for v in range(len(sets)) if v != u and y in computed[v]]
            if not donors:
                log.debug("client %s: no donor holds label %s", pset.client, y)
                continue
            positive = [v for v in donors if sim[u, v] > 0]
            if positive:
                # stable sort keeps client order among equal similarities
                nearest = sorted(positive, key=lambda v: -sim[u, v])[:n]
                w = np.array([sim[u, v] for v in nearest])
                vecs = np.stack([computed[v][y] for v in nearest])
                vec = w @ vecs / w.sum()
            else:
                vec = np.mean([computed[v][y] for v in donors], axis=0)
            entries[y] = Prototype(int(y), vec, PREDICTED)
        out.append(PrototypeSet(pset.client, entries))
    return out
