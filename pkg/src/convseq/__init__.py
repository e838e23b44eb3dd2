"""Attribute-aware sequential recommender built on down-scaling 1D convolutions."""

from .tensor import Tensor, ShapeError, ConfigurationError, no_grad, track_allocations
from .optim import Parameter, GradientError, adam_step
from .gradcheck import grad_check
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .data import DataError, Dataset, build_dataset, load_dataset
from .pyramid import plan_schedule
from .model import Model
from .trainer import TrainConfig, FitResult, fit
from .metrics import EvaluationError, MetricReport, evaluate, evaluate_groups
from .config import RunConfig, build_run_config, load_config_source
from .bench import BenchError, fit_loglog_slope, measure_scaling
from .estimator import ConvSeqRecommender, check_interactions

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "ConfigurationError",
    "GradientError",
    "CheckpointError",
    "DataError",
    "EvaluationError",
    "BenchError",
    "no_grad",
    "track_allocations",
    "adam_step",
    "grad_check",
    "load_arrays",
    "save_arrays",
    "Dataset",
    "build_dataset",
    "load_dataset",
    "plan_schedule",
    "Model",
    "TrainConfig",
    "FitResult",
    "fit",
    "MetricReport",
    "evaluate",
    "evaluate_groups",
    "RunConfig",
    "build_run_config",
    "load_config_source",
    "fit_loglog_slope",
    "measure_scaling",
    "ConvSeqRecommender",
    "check_interactions",
    "__version__",
]
