"""Personalised federated learning guided by persistent-homology descriptors."""

from .engine import (BaselineState, EngineConfig, PTopoFLState, baseline_round,
                     cluster_clients, run_round, trust_scores)
from .errors import ConfigError, GenerationError, InputError, TopoFLError
from .local_model import LabeledDataset, ModelParams, TrainConfig
from .scenarios import ScenarioConfig, generate_scenario
from .tda import PersistenceDiagram, descriptor, wasserstein_distance

__version__ = "0.1.0"

__all__ = [
    "BaselineState", "ConfigError", "EngineConfig", "GenerationError", "InputError",
    "LabeledDataset", "ModelParams", "PTopoFLState", "PersistenceDiagram",
    "ScenarioConfig", "TopoFLError", "TrainConfig", "baseline_round", "cluster_clients",
    "descriptor", "generate_scenario", "run_round", "trust_scores", "wasserstein_distance",
]
