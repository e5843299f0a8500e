"""Desk-scale networks, training loop, checkpoints and dataset readers."""

from .layers import LayerSpec
from .models import Net, backward_pass, build, forward_pass, lenet, resnet20
from .train import Optimizer, TrainConfig, calibrate, evaluate, train, update_step

__all__ = [
    "LayerSpec", "Net", "backward_pass", "build", "forward_pass", "lenet", "resnet20",
    "Optimizer", "TrainConfig", "calibrate", "evaluate", "train", "update_step",
]
