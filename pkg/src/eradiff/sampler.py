"""Erase inference: strength-controlled initialization, stepwise deterministic
reverse updates with inpainting conditioning, and explicit background
re-imposition.

The loop starts from the input image noised to ``round(strength * T)`` and
walks an evenly spaced descending integer step grid down to zero.  After each
reverse step the pixels outside the hole are re-imposed from the input noised
to the current grid step (the background is visible and must not drift); at
step zero that re-imposition is the clean input itself, which makes background
preservation exact rather than approximate.

A closed-form oracle can stand in for the trained model: it solves for the
prediction that lands the reverse step exactly on the mix trajectory of a
known scene pair, which turns full rollouts into analytic end-to-end tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SampleConfig
from .diffusion import ddim_step, forward_noise, oracle_noise_from_state
from .model import DenoiserModel
from .rng import stream
from .scenegen import ScenePair
from .schedule import NoiseSchedule


class SamplerError(RuntimeError):
    pass


class ModelDenoiser:
    """Adapter running the trained model's prediction at float64."""

    def __init__(self, model: DenoiserModel):
        self.model = model

    def predict(self, latent, mask, masked_image, t, t_prev, init_noise) -> np.ndarray:
        del t_prev, init_noise  # the network is a function of (latent, conditioning, t) only
        out = self.model.predict_noise(latent.astype(self.model.dtype), mask,
                                       masked_image.astype(self.model.dtype), t)
        return out.data.astype(np.float64)


class OracleDenoiser:
    """Ground-truth stand-in: follows the mix trajectory of a known scene.

    With ``exact_transitions`` the prediction is solved for the actual grid
    gap, so any step grid lands exactly on the trajectory.  Without it the
    prediction is the single-step closed form evaluated at the current state
    (what an ideally trained network would output), so coarse grids accumulate
    a discretization error that vanishes as the grid refines.
    """

    def __init__(self, pair: ScenePair, schedule: NoiseSchedule, exact_transitions: bool = True):
        self.pair = pair
        self.schedule = schedule
        self.exact_transitions = exact_transitions

    def predict(self, latent, mask, masked_image, t, t_prev, init_noise) -> np.ndarray:
        del mask, masked_image
        gap = t - t_prev if self.exact_transitions else 1
        return oracle_noise_from_state(latent, self.pair, t, gap, init_noise, self.schedule)


@dataclass
class SampleResult:
    output: np.ndarray  # final image, clamped to [0, 1]
    trajectory: list[np.ndarray]  # steps + 1 states, both endpoints included
    grid: np.ndarray  # descending integer steps, grid[0] = t_start, grid[-1] = 0
    t_start: int
    config: SampleConfig


def step_grid(t_start: int, steps: int) -> np.ndarray:
    """Evenly spaced descending integer steps from t_start to 0, steps+1 entries."""
    if t_start < steps:
        raise SamplerError(
            f"step grid degenerates: strength puts t_start={t_start} below steps={steps}"
        )
    grid = np.rint(np.linspace(t_start, 0, steps + 1)).astype(int)
    if len(np.unique(grid)) != len(grid):
        raise SamplerError(f"step grid has duplicates: {grid}")
    return grid


def erase_sample(
    denoiser,
    input_image: np.ndarray,
    mask: np.ndarray,
    config: SampleConfig,
    schedule: NoiseSchedule,
) -> SampleResult:
    """Remove the masked content from the input image; deterministic per (config, seed)."""
    config = config.validate()
    if input_image.ndim != 3 or mask.shape != input_image.shape[1:]:
        raise SamplerError(f"input {input_image.shape} and mask {mask.shape} disagree")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise SamplerError("mask must be binary")
    if mask.all():
        raise SamplerError("full-image hole mask is rejected")
    if input_image.min() < 0.0 or input_image.max() > 1.0:
        raise SamplerError("input image must lie in [0, 1]")

    t_start = int(round(config.strength * schedule.T))
    grid = step_grid(t_start, config.steps)
    init_noise = stream(config.seed, "erase_init").standard_normal(input_image.shape)
    hole = mask[None, :, :]
    keep = 1.0 - hole
    visible = input_image * keep

    x = forward_noise(input_image, t_start, init_noise, schedule)
    trajectory = [x]
    for t, t_prev in zip(grid[:-1], grid[1:]):
        noise_pred = denoiser.predict(x, mask, visible, int(t), int(t_prev), init_noise)
        x = ddim_step(x, noise_pred, int(t), int(t_prev), schedule)
        x = hole * x + keep * forward_noise(input_image, int(t_prev), init_noise, schedule)
        trajectory.append(x)
    output = np.clip(x, 0.0, 1.0)
    return SampleResult(output=output, trajectory=trajectory, grid=grid, t_start=t_start, config=config)


def leakage_probe(
    denoiser,
    pair: ScenePair,
    strengths,
    config: SampleConfig,
    schedule: NoiseSchedule,
) -> dict[float, SampleResult]:
    """Erase the scene's object at each strength; lower strengths leak more of
    the input (including the object) into the rollout."""
    results: dict[float, SampleResult] = {}
    for s in strengths:
        if not 0.0 < s <= 1.0:
            raise SamplerError(f"strength must be in (0, 1], got {s}")
        cfg = SampleConfig(steps=config.steps, strength=float(s), seed=config.seed)
        results[float(s)] = erase_sample(denoiser, pair.composite, pair.mask, cfg, schedule)
    return results
