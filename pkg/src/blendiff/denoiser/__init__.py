"""Conditional noise-prediction network, its losses, trainer and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import SpeechDiffusion
from .losses import loss_simple, loss_velocity, velocity_identity_check
from .network import (
    DenoiserConfig,
    alignment_bias,
    biased_cross_attention,
    denoiser_fn,
    forward,
    init_params,
    predict_noise,
    sinusoidal_embedding,
)
from .training import TrainConfig, Trainer, TrainingSet, TrainState, batch_loss, train_step

__all__ = [
    "DenoiserConfig", "SpeechDiffusion", "TrainConfig", "TrainState", "Trainer", "TrainingSet",
    "alignment_bias", "batch_loss", "biased_cross_attention", "denoiser_fn", "forward", "init_params",
    "load_checkpoint", "loss_simple", "loss_velocity", "predict_noise", "save_checkpoint",
    "sinusoidal_embedding", "train_step", "velocity_identity_check",
]
