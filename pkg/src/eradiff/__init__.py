"""Desk-scale erase-diffusion engine on procedurally synthesized scenes."""

from .config import EvalConfig, RunConfig, SampleConfig, ScheduleConfig, TrainConfig
from .diffusion import (
    MixState,
    OracleCoefficients,
    ddim_step,
    forward_noise,
    make_mix_state,
    mix_images,
    oracle_coefficients,
    oracle_noise,
)
from .model import DenoiserConfig, DenoiserModel, build_denoiser
from .scenegen import MaskSpec, SceneConfig, ScenePair, generate_scene, random_mask
from .schedule import NoiseSchedule, build_schedule
from .tensor import AdamState, Tape, Tensor, adam_step, backward, finite_difference_gradient

__version__ = "0.1.0"

__all__ = [
    "AdamState", "DenoiserConfig", "DenoiserModel", "EvalConfig", "MaskSpec",
    "MixState", "NoiseSchedule", "OracleCoefficients", "RunConfig", "SampleConfig",
    "SceneConfig", "ScenePair", "ScheduleConfig", "Tape", "Tensor", "TrainConfig",
    "adam_step", "backward", "build_denoiser", "build_schedule", "ddim_step",
    "finite_difference_gradient", "forward_noise", "generate_scene", "make_mix_state",
    "mix_images", "oracle_coefficients", "oracle_noise", "random_mask",
]
