"""Standalone diagnostics: class-level clustering tendency and the model-merging experiment."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import nn
from .clustering import per_class_hopkins
from .data import ClientSplit, Dataset
from .federation import ServerConfig, derive_seed, train_config, weighted_average
from .nn import Mlp
from .prototypes import compute_prototypes


def class_report(ds: Dataset, seed: int = 0) -> dict:
    """Per-class Hopkins over per-client prototypes, with client and sample counts."""
    sets = [compute_prototypes(cd.x, cd.y, cid) for cid, cd in ds.clients.items()]
    h = per_class_hopkins(sets, ds.label_universe, seed)
    classes = {}
    for y in ds.label_universe:
        counts = [int(np.sum(cd.y == y)) for cd in ds.clients.values()]
        classes[str(y)] = {
            "hopkins": h[int(y)],
            "clients": sum(1 for c in counts if c > 0),
            "samples": sum(counts),
        }
    return {"n_clients": len(ds.clients), "feature_dim": ds.feature_dim, "classes": classes}


@dataclass
class MergeRow:
    label: int
    a_local: float | None
    a_merged: float | None
    b_local: float | None
    b_merged: float | None

    def disrupted(self, drop: float = 0.5) -> bool:
        """True when either client's accuracy falls by at least ``drop`` relative."""
        for before, after in ((self.a_local, self.a_merged), (self.b_local, self.b_merged)):
            if before is not None and before > 0 and after <= (1 - drop) * before:
                return True
        return False


@dataclass
class MergeReport:
    a: str
    b: str
    rows: list[MergeRow]

    def disrupted_classes(self, drop: float = 0.5) -> list[int]:
        return [r.label for r in self.rows if r.disrupted(drop)]

    def table(self) -> str:
        def cell(v):
            return "-" if v is None else f"{v:.2f}"
        lines = [f"class  {self.a + ' local':>10} {self.a + ' merged':>10} "
                 f"{self.b + ' local':>10} {self.b + ' merged':>10}"]
        for r in self.rows:
            lines.append(f"{r.label:<6} {cell(r.a_local):>10} {cell(r.a_merged):>10} "
                         f"{cell(r.b_local):>10} {cell(r.b_merged):>10}")
        return "\n".join(lines)


def train_local(model: Mlp, x: np.ndarray, y: np.ndarray, cfg: ServerConfig, client_index: int) -> Mlp:
    """What a client does on its own for ``cfg.rounds`` rounds, with no server."""
    for t in range(cfg.rounds):
        model = nn.train_sgd(model, x, y, train_config(cfg, t, client_index))
    return model


def _class_acc(model: Mlp, x: np.ndarray, y: np.ndarray, labels) -> dict[int, float | None]:
    acc = nn.evaluate(model, x, y).per_class_accuracy if len(y) else {}
    return {int(c): acc.get(int(c)) for c in labels}


def merge_test(ds: Dataset, split: dict[str, ClientSplit], a: str, b: str, cfg: ServerConfig) -> MergeReport:
    for cid in (a, b):
        if cid not in ds.clients:
            raise KeyError(f"unknown client {cid!r}")
    sizes = (ds.feature_dim, *cfg.hidden, ds.n_classes)
    init = nn.init_mlp(sizes, derive_seed(cfg.seed, 0xA11))
    ids = ds.client_ids
    models, sets = [], []
    for cid in (a, b):
        cd, sp = ds.clients[cid], split[cid]
        models.append(train_local(init, cd.x[sp.train], cd.y[sp.train], cfg, ids.index(cid)))
        sets.append((cd.x[sp.test], cd.y[sp.test]))
    merged = weighted_average(models, [1.0, 1.0])
    labels = ds.label_universe
    a_loc, b_loc = (_class_acc(m, *s, labels) for m, s in zip(models, sets))
    a_mer, b_mer = (_class_acc(merged, *s, labels) for s in sets)
    rows = [MergeRow(int(y), a_loc[y], a_mer[y], b_loc[y], b_mer[y]) for y in labels]
    return MergeReport(a, b, rows)


def dissimilar_pair(ds: Dataset, min_samples: int = 10) -> tuple[str, str]:
    """The two clients holding the most separated version of some shared class.

    Separation of class y between clients a and b is the distance between
    their class means over the sum of their RMS spreads around those means,
    so values above 1 mean the two sample clouds barely overlap.
    """
    stats: dict[str, dict[int, tuple[np.ndarray, float]]] = {}
    for cid, cd in ds.clients.items():
        stats[cid] = {}
        for y in np.unique(cd.y):
            xs = cd.x[cd.y == y]
            if len(xs) >= min_samples:
                mu = xs.mean(axis=0)
                stats[cid][int(y)] = (mu, float(np.sqrt(((xs - mu) ** 2).sum(axis=1).mean())))
    best, pair = -1.0, None
    for a, b in itertools.combinations(ds.client_ids, 2):
        for y in sorted(stats[a].keys() & stats[b].keys()):
            (ma, sa), (mb, sb) = stats[a][y], stats[b][y]
            sep = float(np.linalg.norm(ma - mb)) / max(sa + sb, 1e-12)
            if sep > best:
                best, pair = sep, (a, b)
    if pair is None:
        raise ValueError(f"no two clients share a class with {min_samples} samples each")
    return pair
