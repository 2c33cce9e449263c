"""Round orchestration for FedSub and the FedAvg baseline."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .clustering import select_clusters
from .data import ClientSplit, Dataset, DynamicSchedule, apply_dynamic
from .fusion import (FusionStrategy, assemble_client_update, fuse, own_activation_union,
                     score_clients)
from .nn import Mlp, TrainConfig
from .prototypes import PREDICTED, PrototypeSet, compute_prototypes, predict_missing_prototypes
from .subnetworks import ClientUpdate, Depth, Subnetwork, apply_update, extract_subnetworks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerConfig:
    algorithm: str = "fedsub"
    rounds: int = 50
    clients_per_round: int | None = None  # None: every client
    strategy: FusionStrategy = FusionStrategy.OVERLAPPING
    depth: Depth = Depth.partial(2)
    neighbors: int = 3
    k_max: int = 10
    learning_rate: float = 0.1
    epochs: int = 1
    batch_size: int = 32
    hidden: tuple[int, ...] = (128, 512)
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("fedsub", "fedavg"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.neighbors < 1 or self.k_max < 2:
            raise ValueError("neighbors must be >= 1 and k_max >= 2")
        object.__setattr__(self, "strategy", FusionStrategy(self.strategy))
        TrainConfig(self.learning_rate, self.epochs, self.batch_size)


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts, independent of execution order."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> 1)


def train_config(cfg: ServerConfig, round_idx: int, client_index: int) -> TrainConfig:
    return TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size,
                       derive_seed(cfg.seed, round_idx, client_index, 1))


@dataclass
class ClientState:
    id: str
    index: int
    model: Mlp
    x: np.ndarray
    y: np.ndarray
    split: ClientSplit  # visible indices for the current round
    prototypes: PrototypeSet | None = None

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self.split, name)
        return self.x[idx], self.y[idx]


@dataclass
class ClientArtifacts:
    prototypes: PrototypeSet
    subnetworks: dict[int, Subnetwork]
    accuracy: dict[int, float]


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(len(v)))


@dataclass
class RoundReport:
    round: int
    client_ids: list[str]
    f1: list[float]
    loss: list[float]
    participants: list[str] = field(default_factory=list)
    clusters_per_class: dict[int, int] = field(default_factory=dict)
    predicted_prototypes: int = 0

    @property
    def f1_mean(self) -> float:
        return mean_ci(self.f1)[0]

    @property
    def loss_mean(self) -> float:
        return mean_ci(self.loss)[0]

    def to_dict(self) -> dict:
        f1m, f1ci = mean_ci(self.f1)
        lm, lci = mean_ci(self.loss)
        return {
            "round": self.round,
            "f1_mean": f1m, "f1_ci95": f1ci,
            "loss_mean": lm, "loss_ci95": lci,
            "participants": len(self.participants),
            "clusters_per_class": {str(k): v for k, v in sorted(self.clusters_per_class.items())},
            "predicted_prototypes": self.predicted_prototypes,
        }


def _per_class_accuracy(model: Mlp, x: np.ndarray, y: np.ndarray) -> dict[int, float]:
    if len(y) == 0:
        return {}
    return nn.evaluate(model, x, y).per_class_accuracy


def client_round(state: ClientState, update: ClientUpdate | None, cfg: ServerConfig,
                 round_idx: int) -> tuple[ClientState, PrototypeSet, dict[int, Subnetwork], dict[int, float]]:
    """Apply a pending update, fine-tune locally, then build the artifacts to upload."""
    model = state.model
    if update is not None:
        model = apply_update(model, update, cfg.depth)
    xt, yt = state.part("train")
    model = nn.train_sgd(model, xt, yt, train_config(cfg, round_idx, state.index))
    protos = compute_prototypes(xt, yt, state.id)
    subnets = extract_subnetworks(model, xt, yt, cfg.depth)
    # validation slice first, falling back to train for labels it lacks
    acc = _per_class_accuracy(model, xt, yt)
    acc.update(_per_class_accuracy(model, *state.part("val")))
    new_state = ClientState(state.id, state.index, model, state.x, state.y, state.split, protos)
    return new_state, protos, subnets, acc


def _threads() -> int:
    raw = os.environ.get("FEDSUB_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


def _parallel_map(fn: Callable, items: list) -> list:
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def evaluate_client(model: Mlp, state: ClientState) -> tuple[float, float]:
    xe, ye = state.part("test")
    if len(ye) == 0:
        raise nn.EmptyDatasetError(f"client {state.id} has no visible test samples")
    ev = nn.evaluate(model, xe, ye)
    return ev.macro_f1, ev.mean_loss


class Federation:
    """Mutable simulation state: clients, pending updates, and the FedAvg global model."""

    def __init__(self, dataset: Dataset, split: dict[str, ClientSplit], cfg: ServerConfig,
                 schedule: DynamicSchedule | None = None):
        self.dataset = dataset
        self.full_split = split
        self.schedule = schedule
        self.cfg = cfg
        sizes = (dataset.feature_dim, *cfg.hidden, dataset.n_classes)
        init = nn.init_mlp(sizes, derive_seed(cfg.seed, 0xA11))
        self.global_model = init
        self.clients = [
            ClientState(cid, i, init, cd.x, cd.y, split[cid])
            for i, (cid, cd) in enumerate(dataset.clients.items())
        ]
        self.pending: dict[str, ClientUpdate] = {}
        if cfg.clients_per_round is not None and cfg.clients_per_round > len(self.clients):
            raise ValueError("clients_per_round exceeds the number of clients")
        cfg.depth.covered(init)

    def _refresh_views(self, round_idx: int) -> None:
        views = apply_dynamic(self.dataset, self.full_split, self.schedule, round_idx)
        for st in self.clients:
            st.split = views[st.id]

    def sample(self, round_idx: int) -> list[int]:
        m = self.cfg.clients_per_round or len(self.clients)
        rng = np.random.default_rng(derive_seed(self.cfg.seed, round_idx, 0x5A))
        return sorted(rng.choice(len(self.clients), size=m, replace=False).tolist())

    def _report(self, round_idx: int, participants: list[int], models: list[Mlp]) -> RoundReport:
        scores = [evaluate_client(m, st) for m, st in zip(models, self.clients)]
        return RoundReport(round_idx, [st.id for st in self.clients],
                           [s[0] for s in scores], [s[1] for s in scores],
                           [self.clients[i].id for i in participants])

    def server_round(self, round_idx: int) -> RoundReport:
        cfg = self.cfg
        self._refresh_views(round_idx)
        chosen = self.sample(round_idx)

        def work(i):
            st = self.clients[i]
            return client_round(st, self.pending.pop(st.id, None), cfg, round_idx)

        results = _parallel_map(work, chosen)
        protos, subnets, accs, ids = [], {}, {}, []
        for i, (st, p, s, a) in zip(chosen, results):
            self.clients[i] = st
            protos.append(p)
            subnets[st.id] = s
            accs[st.id] = a
            ids.append(st.id)

        filled = predict_missing_prototypes(protos, self.dataset.label_universe, cfg.neighbors)
        n_pred = sum(1 for p in filled for e in p.entries.values() if e.provenance == PREDICTED)

        memberships: dict[str, list] = {cid: [] for cid in ids}
        clusters_per_class = {}
        for y in self.dataset.label_universe:
            holders = {p.client: p.entries[y].vector for p in filled if y in p.entries}
            if not holders:
                continue
            assignment = select_clusters(holders, y, cfg.k_max, derive_seed(cfg.seed, round_idx, y, 0xC1))
            clusters_per_class[int(y)] = len(assignment.clusters)
            for members in assignment.clusters:
                donors = [c for c in members if y in subnets[c]]
                if not donors:
                    continue
                sn = [subnets[c][y] for c in donors]
                scores = score_clients(donors, y, [s.support for s in sn], cfg.strategy,
                                       [accs[c].get(y, 0.0) for c in donors])
                fused = fuse(cfg.strategy, sn, scores, donors)
                for c in members:
                    memberships[c].append(fused)

        for i in chosen:
            st = self.clients[i]
            own = own_activation_union(subnets[st.id].values())
            self.pending[st.id] = assemble_client_update(
                st.id, memberships[st.id], cfg.strategy, st.model, cfg.depth, own)

        report = self._report(round_idx, chosen, [st.model for st in self.clients])
        report.clusters_per_class = clusters_per_class
        report.predicted_prototypes = n_pred
        return report

    def fedavg_round(self, round_idx: int) -> RoundReport:
        cfg = self.cfg
        self._refresh_views(round_idx)
        chosen = self.sample(round_idx)
        start = self.global_model

        def work(i):
            st = self.clients[i]
            xt, yt = st.part("train")
            return nn.train_sgd(start, xt, yt, train_config(cfg, round_idx, st.index)), len(yt)

        results = _parallel_map(work, chosen)
        self.global_model = weighted_average([m for m, _ in results], [n for _, n in results])
        for st in self.clients:
            st.model = self.global_model
        return self._report(round_idx, chosen, [self.global_model] * len(self.clients))

    def run_round(self, round_idx: int) -> RoundReport:
        if self.cfg.algorithm == "fedavg":
            return self.fedavg_round(round_idx)
        return self.server_round(round_idx)


def weighted_average(models: Sequence[Mlp], sizes: Sequence[float]) -> Mlp:
    """Sample-size-weighted elementwise mean of models."""
    if not models:
        raise ValueError("no models to average")
    w = np.asarray(sizes, dtype=np.float64)
    w = w / w.sum()
    layers = []
    for l in range(len(models[0])):
        layers.append(nn.DenseLayer(
            np.tensordot(w, np.stack([m.layers[l].weights for m in models]), axes=1),
            np.tensordot(w, np.stack([m.layers[l].biases for m in models]), axes=1),
        ))
    return Mlp(tuple(layers))


@dataclass
class Scenario:
    dataset: Dataset
    split: dict[str, ClientSplit]
    schedule: DynamicSchedule | None = None


def run_experiment(scenario: Scenario, cfg: ServerConfig,
                   on_round: Callable[[RoundReport], None] | None = None) -> list[RoundReport]:
    fed = Federation(scenario.dataset, scenario.split, cfg, scenario.schedule)
    reports = []
    for t in range(cfg.rounds):
        rep = fed.run_round(t)
        log.info("round %d: f1 %.4f loss %.4f", t, rep.f1_mean, rep.loss_mean)
        reports.append(rep)
        if on_round is not None:
            on_round(rep)
    return reports
