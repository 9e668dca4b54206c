"""Identifiable latent causal models with additive noise: data generation,
a masked autoregressive variational model trained with a small reverse-mode
autodiff engine, assumption checkers and recovery metrics."""

from .estimator import LatentCausalModel
from .evaluate import EvalReport, evaluate_latents, mpc, shd
from .model import LanmModel, ModelConfig
from .scmgen import GenConfig, ScmSpec, chain_spec, gen_dataset
from .train import TrainConfig, train

__all__ = [
    "EvalReport",
    "GenConfig",
    "LanmModel",
    "LatentCausalModel",
    "ModelConfig",
    "ScmSpec",
    "TrainConfig",
    "chain_spec",
    "evaluate_latents",
    "gen_dataset",
    "mpc",
    "shd",
    "train",
]

__version__ = "0.1.0"
