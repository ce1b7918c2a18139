"""Physics-regularized graph-attention surrogates for AC power flow, with a
file-backed hardware-in-the-loop data path."""

__version__ = "0.1.0"

from .dataset import MutationConfig, Sample, generate, load_dataset, \
    save_dataset
from .grid import GridCase, load_bundled_case, load_case, save_case, validate
from .losses import LossConfig
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, init_params, load_params, predict, save_params
from .powerflow import PfSolution, solve_pf
from .training import TrainConfig, finetune, train

__all__ = [
    "GridCase", "LossConfig", "MetricsReport", "ModelConfig",
    "MutationConfig", "PfSolution", "Sample", "TrainConfig", "__version__",
    "evaluate", "finetune", "generate", "init_params", "load_bundled_case",
    "load_case", "load_dataset", "load_params", "predict", "save_case",
    "save_dataset", "save_params", "solve_pf", "train", "validate",
]
