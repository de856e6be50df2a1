"""Spectral style-DCGAN toolkit: networks, training, metrics, persistence."""

from .config import TrainConfig
from .networks import (
    Discriminator,
    Generator,
    MappingNetwork,
    count_parameters,
    init_weights,
    interpolate_latents,
)
from .training import run_training

__all__ = [
    "TrainConfig",
    "Discriminator",
    "Generator",
    "MappingNetwork",
    "count_parameters",
    "init_weights",
    "interpolate_latents",
    "run_training",
]
