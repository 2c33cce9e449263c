"""Deterministic simulator for personalized federated learning with per-class subnetworks."""

from .federation import Federation, RoundReport, Scenario, ServerConfig, run_experiment
from .fusion import FusionStrategy
from .subnetworks import Depth

__all__ = ["Depth", "Federation", "FusionStrategy", "RoundReport", "Scenario", "ServerConfig",
           "run_experiment"]
__version__ = "0.1.0"
