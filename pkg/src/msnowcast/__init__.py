"""ConvLSTM encoder-forecaster for radar precipitation nowcasting, on a numpy autodiff core."""

from .autodiff import ConfigurationError, NonFiniteError, Tape, Tensor, backward
from .baselines import estimate_flow, optical_flow_forecast, persistence_forecast
from .config import ExperimentConfig, toy_experiment
from .data import RadarSequence, SyntheticConfig, WindowConfig, gen_synthetic_sequence, window_dataset
from .metrics import MetricsReport, evaluate_run
from .model import ModelConfig, forward, init_params, param_manifest
from .training import TrainConfig, train_loop

__all__ = [
    "ConfigurationError",
    "ExperimentConfig",
    "MetricsReport",
    "ModelConfig",
    "NonFiniteError",
    "RadarSequence",
    "SyntheticConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "WindowConfig",
    "backward",
    "estimate_flow",
    "evaluate_run",
    "forward",
    "gen_synthetic_sequence",
    "init_params",
    "optical_flow_forecast",
    "param_manifest",
    "persistence_forecast",
    "toy_experiment",
    "train_loop",
    "window_dataset",
]
