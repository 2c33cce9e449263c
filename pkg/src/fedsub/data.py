"""Client datasets: CSV ingestion, synthetic non-IID generation, splits and
the static/dynamic visibility schedules."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class ClientData:
    x: np.ndarray  # (n, feature_dim)
    y: np.ndarray  # (n,) int64


@dataclass
class Dataset:
    feature_dim: int
    label_universe: tuple[int, ...]
    clients: dict[str, ClientData]

    def __post_init__(self):
        universe = set(self.label_universe)
        for cid, cd in self.clients.items():
            if cd.x.ndim != 2 or cd.x.shape[1] != self.feature_dim:
                raise DataError(f"client {cid}: features must have length {self.feature_dim}")
            if len(cd.y) == 0 or len(cd.y) != len(cd.x):
                raise DataError(f"client {cid}: needs at least one sample and one label per row")
            if not set(np.unique(cd.y).tolist()) <= universe:
                raise DataError(f"client {cid}: labels outside the label universe")

    @property
    def client_ids(self) -> list[str]:
        return list(self.clients)

    @property
    def n_classes(self) -> int:
        return max(self.label_universe) + 1


def standardize(ds: Dataset) -> Dataset:
    """Zero-mean, unit-variance features using statistics over all clients."""
    allx = np.concatenate([cd.x for cd in ds.clients.values()])
    mu = allx.mean(axis=0)
    sd = allx.std(axis=0)
    sd[sd == 0] = 1.0
    clients = {cid: ClientData((cd.x - mu) / sd, cd.y.copy()) for cid, cd in ds.clients.items()}
    return Dataset(ds.feature_dim, ds.label_universe, clients)


def load_csv(path, standardize_features: bool = True) -> Dataset:
    """Read ``client_id,label,f0,...,f{d-1}`` rows. Client order follows first appearance."""
    path = Path(path)
    rows: dict[str, tuple[list, list]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "client_id" or header[1] != "label":
            raise ParseError(1, "header must start with client_id,label followed by feature columns")
        d = len(header) - 2
        if header[2:] != [f"f{i}" for i in range(d)]:
            raise ParseError(1, "feature columns must be named f0..f{d-1} in order")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != d + 2:
                raise ParseError(lineno, f"expected {d + 2} fields, got {len(row)}")
            cid = row[0].strip()
            if not cid:
                raise ParseError(lineno, "empty client_id")
            label_s = row[1].strip()
            if not label_s.isdigit():
                raise ParseError(lineno, f"label must be a non-negative integer, got {label_s!r}")
            try:
                feats = [float(v) for v in row[2:]]
            except ValueError:
                raise ParseError(lineno, "non-numeric feature value") from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(lineno, "feature values must be finite")
            xs, ys = rows.setdefault(cid, ([], []))
            xs.append(feats)
            ys.append(int(label_s))
    if not rows:
        raise ParseError(2, "no data rows")
    labels = sorted({y for _, ys in rows.values() for y in ys})
    universe = tuple(range(max(labels) + 1))
    clients = {
        cid: ClientData(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64))
        for cid, (xs, ys) in rows.items()
    }
    ds = Dataset(d, universe, clients)
    return standardize(ds) if standardize_features else ds


def write_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "label"] + [f"f{i}" for i in range(ds.feature_dim)])
        for cid, cd in ds.clients.items():
            for xi, yi in zip(cd.x, cd.y):
                w.writerow([cid, int(yi)] + [repr(float(v)) for v in xi])


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the Gaussian non-IID generator.

    Each class has a global mean. For every class, clients are split into
    ``groups`` behaviour groups; a group shifts the class mean by a random
    offset of scale ``jitter`` and each client adds its own smaller shift of
    scale ``jitter * client_spread``. Label proportions per client come from a
    symmetric Dirichlet with parameter ``concentration``.
    """

    n_clients: int = 20
    n_classes: int = 6
    feature_dim: int = 8
    samples_per_client: int = 300
    class_sep: float = 1.0
    noise: float = 1.5
    jitter: float = 3.0
    groups: int = 5
    client_spread: float = 0.05
    concentration: float = 0.3
    min_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clients", "n_classes", "feature_dim", "samples_per_client", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("class_sep", "noise", "concentration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.jitter < 0 or self.client_spread < 0:
            raise ValueError("jitter and client_spread must be >= 0")
        if not 1 <= self.min_classes <= self.n_classes:
            raise ValueError("min_classes must lie in [1, n_classes]")


def _label_counts(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    n, c = cfg.samples_per_client, cfg.n_classes
    if math.isinf(cfg.concentration):
        props = np.full(c, 1.0 / c)
    else:
        props = rng.dirichlet(np.full(c, cfg.concentration))
    counts = np.floor(props * n).astype(int)
    # largest remainders first, so counts sum exactly to n
    rem = props * n - counts
    for k in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    # keep a few samples for the weakest required classes so every client is trainable
    for k in np.argsort(-counts, kind="stable")[: cfg.min_classes]:
        if counts[k] < 4:
            donor = int(np.argmax(counts))
            take = 4 - counts[k]
            counts[k] += take
            counts[donor] -= take
    return counts


def generate_synthetic(cfg: SynthConfig, standardize_features: bool = True) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    c, d = cfg.n_classes, cfg.feature_dim
    class_means = rng.normal(0.0, cfg.class_sep, size=(c, d))
    group_offsets = rng.normal(0.0, cfg.jitter, size=(c, cfg.groups, d))
    clients = {}
    width = len(str(cfg.n_clients - 1))
    for u in range(cfg.n_clients):
        groups = rng.integers(0, cfg.groups, size=c)
        own = rng.normal(0.0, cfg.jitter * cfg.client_spread, size=(c, d))
        counts = _label_counts(rng, cfg)
        xs, ys = [], []
        for y in range(c):
            if counts[y] == 0:
                continue
            mean = class_means[y] + group_offsets[y, groups[y]] + own[y]
            xs.append(mean + rng.normal(0.0, cfg.noise, size=(counts[y], d)))
            ys.append(np.full(counts[y], y, dtype=np.int64))
        x = np.concatenate(xs)
        yv = np.concatenate(ys)
        perm = rng.permutation(len(yv))
        clients[f"c{u:0{width}d}"] = ClientData(x[perm], yv[perm])
    ds = Dataset(d, tuple(range(c)), clients)
    return standardize(ds) if standardize_features else ds


@dataclass(frozen=True)
class ClientSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _client_rng(seed: int, cid: str, stream: int) -> np.random.Generator:
    # keyed by client id so results do not depend on iteration order
    key = [int(b) for b in cid.encode("utf-8")]
    return np.random.default_rng([seed, stream, len(key)] + key)


def stratified_split(ds: Dataset, test_fraction: float = 0.30, seed: int = 0,
                     val_fraction: float = 0.10) -> dict[str, ClientSplit]:
    """Per client and class: floor(fraction * n_y) test samples (at least one
    when n_y >= 2); validation is carved from the remaining train indices."""
    if not 0 <= test_fraction < 1 or not 0 <= val_fraction < 1:
        raise ValueError("fractions must lie in [0, 1)")
    out = {}
    for cid, cd in ds.clients.items():
        rng = _client_rng(seed, cid, 0)
        train, test = [], []
        for y in np.unique(cd.y):
            idx = rng.permutation(np.flatnonzero(cd.y == y))
            n_y = len(idx)
            n_test = int(math.floor(test_fraction * n_y + 1e-9))
            if n_y >= 2 and test_fraction > 0:
                n_test = max(1, n_test)
            test.extend(idx[:n_test].tolist())
            train.extend(idx[n_test:].tolist())
        train = np.array(sorted(train), dtype=np.int64)
        vrng = _client_rng(seed, cid, 1)
        n_val = int(math.floor(val_fraction * len(train)))
        if n_val >= len(train):
            n_val = len(train) - 1
        perm = vrng.permutation(train)
        val = np.sort(perm[:n_val])
        tr = np.sort(perm[n_val:])
        out[cid] = ClientSplit(tr, val, np.array(sorted(test), dtype=np.int64))
    return out


@dataclass(frozen=True)
class DynamicSchedule:
    period: int
    withheld: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def affected(self) -> list[str]:
        return list(self.withheld)

    def restored(self, cid: str, round_idx: int) -> tuple[int, ...]:
        """Withheld labels already reintroduced for ``cid`` at ``round_idx``."""
        labels = self.withheld.get(cid, ())
        n = min(len(labels), round_idx // self.period) if self.period > 0 else 0
        return labels[:n]

    def hidden(self, cid: str, round_idx: int) -> set[int]:
        labels = self.withheld.get(cid, ())
        return set(labels) - set(self.restored(cid, round_idx))

    def event_rounds(self) -> list[int]:
        longest = max((len(v) for v in self.withheld.values()), default=0)
        return [self.period * k for k in range(1, longest + 1)]


def make_dynamic_schedule(ds: Dataset, period: int, seed: int = 0,
                          fraction: float = 0.6) -> DynamicSchedule:
    """Pick ``fraction`` of the clients and withhold ceil((C-1)/2) of their
    labels. A client's most frequent label is never withheld, so it keeps
    both train and test samples from round 0."""
    if period < 1:
        raise ValueError("period must be >= 1")
    rng = np.random.default_rng([seed, 7])
    ids = ds.client_ids
    n_aff = int(round(fraction * len(ids)))
    chosen = sorted(rng.choice(len(ids), size=n_aff, replace=False).tolist())
    target = math.ceil((len(ds.label_universe) - 1) / 2)
    withheld = {}
    for i in chosen:
        cid = ids[i]
        present, counts = np.unique(ds.clients[cid].y, return_counts=True)
        candidates = np.delete(present, int(np.argmax(counts)))
        k = min(target, len(candidates))
        if k <= 0:
            continue
        withheld[cid] = tuple(int(v) for v in rng.choice(candidates, size=k, replace=False))
    return DynamicSchedule(period, withheld)


def apply_dynamic(ds: Dataset, split: dict[str, ClientSplit], schedule: DynamicSchedule | None,
                  round_idx: int) -> dict[str, ClientSplit]:
    """Indices visible to each client at ``round_idx``."""
    if schedule is None:
        return dict(split)
    out = {}
    for cid, sp in split.items():
        hidden = schedule.hidden(cid, round_idx)
        if not hidden:
            out[cid] = sp
            continue
        y = ds.clients[cid].y
        keep = lambda idx: idx[~np.isin(y[idx], list(hidden))]  # noqa: E731
        out[cid] = ClientSplit(keep(sp.train), keep(sp.val), keep(sp.test))
    return out
