"""Masked-diffusion language modelling on a small numpy autodiff engine.

The pieces, bottom up: :mod:`~boelab.autodiff` (reverse-mode tape with
row-sparse gradients), :mod:`~boelab.diffusion` (absorbing-mask process and
loss), :mod:`~boelab.model` (the transformer denoiser), :mod:`~boelab.sampler`
(greedy and entropy-gradient decoders), :mod:`~boelab.oracle` (checks of the
first-order score against exact entropy changes), :mod:`~boelab.tasks`
(synthetic data) and :mod:`~boelab.cli`.
"""

from .diffusion import NoiseSchedule, Vocabulary
from .estimator import BoESampler, GreedySampler, MaskedDiffusionLM
from .exceptions import (AuditError, BoeLabError, CheckpointError, ConfigError, ContractError, NumericError,
                         ShapeError)
from .model import Denoiser, DenoiserConfig
from .sampler import BoEConfig, GreedyConfig, boe_decode, greedy_decode
from .tasks import TaskSpec, evaluate, generate

__version__ = "0.1.0"

__all__ = [
    "AuditError",
    "BoESampler",
    "BoEConfig",
    "BoeLabError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "Denoiser",
    "DenoiserConfig",
    "GreedyConfig",
    "GreedySampler",
    "MaskedDiffusionLM",
    "NoiseSchedule",
    "NumericError",
    "ShapeError",
    "TaskSpec",
    "Vocabulary",
    "boe_decode",
    "evaluate",
    "generate",
    "greedy_decode",
]
