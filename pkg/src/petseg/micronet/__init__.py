"""Desk-scale 3D UNet with hand-written backward passes."""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, finite_difference_check
from .loss import LossSpec, dice_ce_loss, loss_and_grad
from .network import NetConfig, StepNetwork, UNet3D, build_network
from .optim import OptimizerState, sgd_step
from .synthetic import generate_synthetic_study, synthetic_dataset
from .train import TrainHistory, predict, predict_labels, train

__all__ = [
    "GradCheckResult",
    "LossSpec",
    "NetConfig",
    "OptimizerState",
    "StepNetwork",
    "TrainHistory",
    "UNet3D",
    "build_network",
    "dice_ce_loss",
    "finite_difference_check",
    "generate_synthetic_study",
    "load_checkpoint",
    "loss_and_grad",
    "predict",
    "predict_labels",
    "save_checkpoint",
    "sgd_step",
    "synthetic_dataset",
    "train",
]
