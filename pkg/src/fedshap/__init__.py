"""Federated learning simulator with Shapley-value client selection."""

from .errors import (
    CapacityError,
    ConfigurationError,
    FedShapError,
    IngestionError,
    InputError,
    LogicError,
    RunError,
    TrainingError,
    UtilityError,
)
from .nn import Dataset, MlpModel, ParamVector, TrainConfig, client_update, forward_loss, model_average
from .selection import SelectionContext, StrategyConfig, rr_phase_length, select
from .shapley import CoalitionUtility, CumulativeSv, GtgConfig, SvReport, exact_shapley, gtg_shapley
from .simulator import DataConfig, RunResult, SimConfig, compare, run, run_centralized

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "CoalitionUtility",
    "ConfigurationError",
    "CumulativeSv",
    "DataConfig",
    "Dataset",
    "FedShapError",
    "GtgConfig",
    "IngestionError",
    "InputError",
    "LogicError",
    "MlpModel",
    "ParamVector",
    "RunError",
    "RunResult",
    "SelectionContext",
    "SimConfig",
    "StrategyConfig",
    "SvReport",
    "TrainConfig",
    "TrainingError",
    "UtilityError",
    "client_update",
    "compare",
    "exact_shapley",
    "forward_loss",
    "gtg_shapley",
    "model_average",
    "rr_phase_length",
    "run",
    "run_centralized",
    "select",
]
