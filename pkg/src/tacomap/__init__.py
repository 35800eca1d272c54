"""Continual neural implicit mapping with importance-weighted temporal consensus."""

from .consensus import ConsensusConfig, DescentRule, TacoState, taco_step
from .errors import ConfigError, NumericalFailure
from .field import FieldConfig, FieldModel, load_checkpoint
from .loss import LossWeights, objective
from .metrics import MetricsReport, extract_zero_set, report
from .render import RayBatch, RenderConfig
from .runner import RunConfig, compare, load_config, run
from .strategies import Strategy, StrategyConfig, StrategyKind
from .world import Scenario, load_scenario, observe, stage_at

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConsensusConfig",
    "DescentRule",
    "FieldConfig",
    "FieldModel",
    "LossWeights",
    "MetricsReport",
    "NumericalFailure",
    "RayBatch",
    "RenderConfig",
    "RunConfig",
    "Scenario",
    "Strategy",
    "StrategyConfig",
    "StrategyKind",
    "TacoState",
    "compare",
    "extract_zero_set",
    "load_checkpoint",
    "load_config",
    "load_scenario",
    "objective",
    "observe",
    "report",
    "run",
    "stage_at",
    "taco_step",
]
