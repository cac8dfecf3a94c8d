"""Minimal numpy feed-forward engine with exact gradients."""

from .io import deserialize_params, parse_param_file, serialize_params
from .losses import BCE, L1, LSQ, bce_loss, l1_loss, loss_and_grad, lsgan_losses, lsq_loss
from .network import (
    EVAL,
    TRAIN,
    Batch,
    backprop,
    backward,
    forward,
    forward_cache,
    sgd_step,
    train_step,
    update_running_stats,
    value_and_grad,
)
from .params import ArchSpec, ModelParams, init_params, layout, mlp_arch, zero_params

__all__ = [
    "ArchSpec", "ModelParams", "Batch", "init_params", "zero_params", "mlp_arch", "layout",
    "forward", "forward_cache", "backward", "backprop", "value_and_grad", "sgd_step",
    "train_step", "update_running_stats", "bce_loss", "l1_loss", "lsq_loss",
    "lsgan_losses", "loss_and_grad", "serialize_params", "deserialize_params",
    "parse_param_file", "BCE", "L1", "LSQ", "TRAIN", "EVAL",
]
