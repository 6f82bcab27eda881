"""Trainable multitask embedding network with verifiable gradients."""

from .net import (
    LossTerms,
    NetConfig,
    NetOutputs,
    NetParams,
    backward,
    forward,
    init_params,
    loss,
)
from .optim import OptState, init_opt_state, rmsprop_step
from .train import (
    AugmentConfig,
    TrainBatch,
    distill,
    distill_pair_loss,
    extract_embedding,
    fused_embeddings,
    make_batch,
    train,
)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AugmentConfig",
    "LossTerms",
    "NetConfig",
    "NetOutputs",
    "NetParams",
    "OptState",
    "TrainBatch",
    "backward",
    "distill",
    "distill_pair_loss",
    "extract_embedding",
    "forward",
    "fused_embeddings",
    "init_opt_state",
    "init_params",
    "load_checkpoint",
    "loss",
    "make_batch",
    "rmsprop_step",
    "save_checkpoint",
    "train",
]
