"""Experiment configuration: a flat TOML file plus an optional [synthetic] table.

Example::

    algorithm = "fedsub"
    scenario = "dynamic"
    fusion = "overlapping"
    depth = "partial"
    partial_layers = 2
    rounds = 50
    period = 10
    seed = 3
    output_dir = "out/run3"

    [synthetic]
    concentration = 0.3
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import (Dataset, SynthConfig, generate_synthetic, load_csv, make_dynamic_schedule,
                   stratified_split)
from .federation import Scenario, ServerConfig
from .fusion import FusionStrategy
from .subnetworks import Depth


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedsub"
    scenario: str = "static"
    fusion: str = "overlapping"
    depth: str = "partial"
    partial_layers: int = 2
    rounds: int = 300
    clients_per_round: int | None = None
    epochs: int = 1
    learning_rate: float = 0.1
    batch_size: int = 32
    neighbors: int = 3
    k_max: int = 10
    period: int = 10
    seed: int = 0
    hidden: tuple[int, ...] = (128, 512)
    dataset: str | None = None
    output_dir: str = "fedsub-out"
    synthetic: SynthConfig | None = field(default=None)

    def server(self) -> ServerConfig:
        depth = Depth.full() if self.depth == "full" else Depth.partial(self.partial_layers)
        return ServerConfig(
            algorithm=self.algorithm, rounds=self.rounds, clients_per_round=self.clients_per_round,
            strategy=FusionStrategy(self.fusion), depth=depth, neighbors=self.neighbors,
            k_max=self.k_max, learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, hidden=self.hidden, seed=self.seed,
        )

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "synthetic"}
        out["hidden"] = list(self.hidden)
        if self.synthetic is not None:
            syn = dataclasses.asdict(self.synthetic)
            if math.isinf(syn["concentration"]):
                syn["concentration"] = "inf"
            out["synthetic"] = syn
        return out


_CHOICES = {
    "algorithm": ("fedsub", "fedavg"),
    "scenario": ("static", "dynamic"),
    "fusion": tuple(s.value for s in FusionStrategy),
    "depth": ("full", "partial"),
}
_INTS = ("partial_layers", "rounds", "clients_per_round", "epochs", "batch_size", "neighbors",
         "k_max", "period", "seed")
_FLOATS = ("learning_rate",)
_STRS = ("dataset", "output_dir")


def _check_int(name, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    return v


def _synth(table) -> SynthConfig:
    if not isinstance(table, dict):
        raise ConfigError("synthetic", "expected a table")
    known = {f.name: f for f in dataclasses.fields(SynthConfig)}
    kwargs = {}
    for key, v in table.items():
        name = f"synthetic.{key}"
        if key not in known:
            raise ConfigError(name, "unknown key")
        if known[key].type == "int":
            kwargs[key] = _check_int(name, v)
        elif key == "concentration" and v == "inf":
            kwargs[key] = math.inf
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            kwargs[key] = float(v)
        else:
            raise ConfigError(name, f"expected a number, got {v!r}")
    try:
        return SynthConfig(**kwargs)
    except ValueError as e:
        raise ConfigError("synthetic", str(e)) from None


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a decoded TOML document. Unknown keys are errors."""
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs: dict = {}
    for key, v in doc.items():
        if key not in known:
            raise ConfigError(key, "unknown key")
        if key == "synthetic":
            kwargs[key] = _synth(v)
        elif key in _CHOICES:
            if v not in _CHOICES[key]:
                raise ConfigError(key, f"must be one of {', '.join(_CHOICES[key])}")
            kwargs[key] = v
        elif key in _INTS:
            kwargs[key] = _check_int(key, v)
        elif key in _FLOATS:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(key, f"expected a number, got {v!r}")
            kwargs[key] = float(v)
        elif key in _STRS:
            if not isinstance(v, str):
                raise ConfigError(key, f"expected a string, got {v!r}")
            if base_dir is not None and not Path(v).is_absolute():
                v = str(base_dir / v)
            kwargs[key] = v
        elif key == "hidden":
            if not isinstance(v, list) or not v:
                raise ConfigError(key, "expected a non-empty list of layer widths")
            kwargs[key] = tuple(_check_int(key, w) for w in v)
            if min(kwargs[key]) < 1:
                raise ConfigError(key, "layer widths must be >= 1")
    if "dataset" in kwargs and "synthetic" in kwargs:
        raise ConfigError("dataset", "give either a dataset path or a [synthetic] table, not both")
    cfg = ExperimentConfig(**kwargs)
    if cfg.synthetic is not None and "seed" not in doc["synthetic"]:
        # the generator follows the experiment seed unless pinned
        cfg = dataclasses.replace(cfg, synthetic=dataclasses.replace(cfg.synthetic, seed=cfg.seed))
    if cfg.period < 1:
        raise ConfigError("period", "must be >= 1")
    if cfg.partial_layers < 1:
        raise ConfigError("partial_layers", "must be >= 1")
    if cfg.depth == "partial" and cfg.partial_layers > len(cfg.hidden):
        raise ConfigError("partial_layers", "must leave at least the output layer local")
    try:
        cfg.server()
    except ValueError as e:
        msg = str(e)
        raise ConfigError(msg.split()[0], msg) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("<file>", f"invalid TOML: {e}") from None
    return parse_config(doc, path.parent)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset is not None:
        return load_csv(cfg.dataset)
    syn = cfg.synthetic
    if syn is None:
        syn = SynthConfig(seed=cfg.seed)
    return generate_synthetic(syn)


def build_scenario(cfg: ExperimentConfig, dataset: Dataset | None = None) -> Scenario:
    ds = dataset if dataset is not None else load_dataset(cfg)
    split = stratified_split(ds, seed=cfg.seed)
    schedule = make_dynamic_schedule(ds, cfg.period, seed=cfg.seed) if cfg.scenario == "dynamic" else None
    return Scenario(ds, split, schedule)
