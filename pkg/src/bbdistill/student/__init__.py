"""The lightweight target model, its objective, augmentation and optimizer."""
from .augment import AugmentSpec, augment
from .model import (
    StudentParams,
    backward,
    ce_loss_and_grad,
    extract_patches,
    forward,
    kd_kl_loss,
    kl_loss_and_grad,
    masked_ce_loss,
)
from .optim import OptimState, optim_step

__all__ = [
    "AugmentSpec",
    "OptimState",
    "StudentParams",
    "augment",
    "backward",
    "ce_loss_and_grad",
    "extract_patches",
    "forward",
    "kd_kl_loss",
    "kl_loss_and_grad",
    "masked_ce_loss",
    "optim_step",
]
