"""Q-weighted discrete flow matching for offline multi-objective RL."""
from .flowcore import RateField, euler_simulate, exact_chain_marginal, target_columns
from .critic import TabularCritic, VectorCritic
from .dataio import OfflineDataset, fit_behavior, generate_dataset, load_dataset, save_dataset
from .envs import make_env
from .training import QDFMPolicy, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "RateField", "euler_simulate", "exact_chain_marginal", "target_columns",
    "TabularCritic", "VectorCritic", "OfflineDataset", "fit_behavior", "generate_dataset",
    "load_dataset", "save_dataset", "make_env", "QDFMPolicy", "TrainConfig", "train",
]
