"""From-scratch 1-D CNN with CReLU activations."""

from .layers import CReLU, Conv1D, Dense, Flatten, MaxPool1D, ShapeError, mse_loss
from .network import Network, NetworkSpec, default_spec, load_weights, save_weights
from .optim import Adam, step_lr
from .train import LearningCurve, TrainConfig, TrainingDivergedError, predict, train

__all__ = ["CReLU", "Conv1D", "Dense", "Flatten", "MaxPool1D", "ShapeError", "mse_loss",
           "Network", "NetworkSpec", "default_spec", "load_weights", "save_weights",
           "Adam", "step_lr", "LearningCurve", "TrainConfig", "TrainingDivergedError",
           "predict", "train"]
