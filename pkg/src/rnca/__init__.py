"""Refinement neural cellular automata for repairing topology in binary masks."""

__version__ = "0.1.0"

from ._accel import BACKEND
from .errors import ContractError, FormatError, MetricUndefinedError, NumericInstabilityError
from .nca import ModelConfig, ModelParams, init_params, load_checkpoint, refine, rollout, save_checkpoint
from .train import TrainConfig, train_loop
