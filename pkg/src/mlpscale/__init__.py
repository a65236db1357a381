"""MLP image classifiers, desk-scale training, and compute scaling-law fits."""

from .data import AugmentConfig, Dataset, SynthSpec, synth_dataset
from .estimators import ChannelNormalizer, MLPClassifier, PowerLawRegressor
from .model import MlpModel, ModelConfig, backward, count_forward_flops, count_params, forward, init_model
from .optim import LionState, SgdMomentumState, lion_step, sgd_momentum_step
from .scaling import PowerLawFit, RunRecord, compute_cost, fit_allocation, fit_power_law, pareto_frontier
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ChannelNormalizer", "Dataset", "LionState", "MLPClassifier", "MlpModel", "ModelConfig",
    "PowerLawFit", "PowerLawRegressor", "RunRecord", "SgdMomentumState", "SynthSpec", "TrainConfig",
    "backward", "compute_cost", "count_forward_flops", "count_params", "fit_allocation", "fit_power_law",
    "forward", "init_model", "lion_step", "load_checkpoint", "pareto_frontier", "save_checkpoint",
    "sgd_momentum_step", "synth_dataset", "train",
]
