__version__ = "0.1.0"

from .api import ExperimentOutcome, PretrainSummary, Workbench, open_workbench
from .errors import (
    AggregationError,
    ConfigError,
    DatasetError,
    FedlocError,
    ResultsNotFoundError,
    ScenarioError,
    ShapeError,
    TrainingDivergedError,
    WireFormatError,
)
from .scenario import ScenarioConfig, ScenarioOverrides, load_scenario_config

__all__ = [
    "__version__",
    "AggregationError",
    "ConfigError",
    "DatasetError",
    "ExperimentOutcome",
    "FedlocError",
    "PretrainSummary",
    "ResultsNotFoundError",
    "ScenarioConfig",
    "ScenarioError",
    "ScenarioOverrides",
    "ShapeError",
    "TrainingDivergedError",
    "WireFormatError",
    "Workbench",
    "load_scenario_config",
    "open_workbench",
]
