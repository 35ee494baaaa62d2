"""Forward noising, mix states, the deterministic DDIM step, and the
closed-form oracle noise that makes the DDIM map follow the mix trajectory.

The mix trajectory interpolates between the object-augmented image (high t)
and the clean background (t = 0): the blend weight at step t is the schedule's
mix level 1 - alpha_bar[t], and the blend is then noised exactly like any
clean image.  Because a single noise draw is shared along the trajectory, the
step-t to step-(t-gap) transition is an affine function of the latent, and the
noise prediction that realizes it has a closed form obtained by solving that
linear relation.  The oracle is the ground-truth stand-in for the trained
denoiser in tests and analytic rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenegen import ScenePair
from .schedule import NoiseSchedule

_GAIN_FLOOR = 1e-14


@dataclass(frozen=True)
class MixState:
    """A point on the mix trajectory: clean blend, its noised latent, the draw."""

    t: int
    blend: np.ndarray  # (C, S, S): background + level * (composite - background)
    latent: np.ndarray  # (C, S, S): sqrt(ab_t) * blend + sqrt(1 - ab_t) * noise
    noise: np.ndarray
    scene_seed: int

    def recompute_latent(self, schedule: NoiseSchedule) -> np.ndarray:
        return forward_noise(self.blend, self.t, self.noise, schedule)


def mix_images(background: np.ndarray, composite: np.ndarray, level: float) -> np.ndarray:
    """Blend ``background + level * (composite - background)``.

    Written in drift form so pixels where the two images agree are returned
    bit-for-bit, and the level-0 / level-1 endpoints are the exact inputs.
    """
    if background.shape != composite.shape:
        raise ValueError(f"image shapes differ: {background.shape} vs {composite.shape}")
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"mix level must be in [0, 1], got {level}")
    if level == 0.0:
        return background.copy()
    if level == 1.0:
        return composite.copy()
    return background + level * (composite - background)


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != image shape {x0.shape}")
    ab = schedule.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def make_mix_state(
    pair: ScenePair,
    t: int,
    noise: np.ndarray,
    schedule: NoiseSchedule,
    level_override: float | None = None,
) -> MixState:
    """Mix state at step t with the schedule's blend weight.

    ``level_override`` freezes the blend weight for t >= 1 (the no-mix-up
    training ablation); the t = 0 state is always the exact background.
    """
    level = schedule.mix_level_at(t)
    if level_override is not None and t > 0:
        level = float(level_override)
        if not 0.0 <= level <= 1.0:
            raise ValueError(f"mix level override must be in [0, 1], got {level}")
    blend = mix_images(pair.background, pair.composite, level)
    latent = forward_noise(blend, t, noise, schedule)
    return MixState(t=int(t), blend=blend, latent=latent, noise=noise, scene_seed=pair.seed)


def ddim_step(
    x_t: np.ndarray, noise_pred: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Deterministic reverse update from step t to an earlier step t_prev."""
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    x0_est = (x_t - np.sqrt(1.0 - ab_t) * noise_pred) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * x0_est + np.sqrt(1.0 - ab_p) * noise_pred


def ddim_transition(t: int, t_prev: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """The DDIM map as an affine function of the latent.

    Returns (carry, gain) with
    ``x_prev = carry * x_t + gain * noise_pred``; the gain is the coefficient
    the closed-form oracle divides by, and is strictly negative for every
    valid schedule and 0 <= t_prev < t.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    carry = np.sqrt(ab_p / ab_t)
    gain = np.sqrt(1.0 - ab_p) - carry * np.sqrt(1.0 - ab_t)
    return float(carry), float(gain)


@dataclass(frozen=True)
class OracleCoefficients:
    """Single-step (gap = 1) closed-form coefficients at step t.

    They satisfy the linear identity
    ``prediction_gain * oracle_noise = state_coef * latent
    + object_coef * composite + noise_coef * noise``.
    """

    t: int
    prediction_gain: float  # sqrt(alpha_t - alpha_bar_t) - sqrt(1 - alpha_bar_t)
    state_coef: float  # 1/alpha_t - 1
    object_coef: float  # sqrt(alpha_bar_t) * (alpha_t - 1) / alpha_t
    noise_coef: float  # sqrt(alpha_t - alpha_bar_t) - sqrt(1 - alpha_bar_t)/alpha_t


def oracle_coefficients(t: int, schedule: NoiseSchedule) -> OracleCoefficients:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} out of range [1, {schedule.T}]")
    a = schedule.alpha_at(t)
    ab = schedule.alpha_bar_at(t)
    gain = np.sqrt(a - ab) - np.sqrt(1.0 - ab)
    if abs(gain) < _GAIN_FLOOR:
        raise ZeroDivisionError(f"oracle prediction gain vanished at t={t}")
    return OracleCoefficients(
        t=int(t),
        prediction_gain=float(gain),
        state_coef=float(1.0 / a - 1.0),
        object_coef=float(np.sqrt(ab) * (a - 1.0) / a),
        noise_coef=float(np.sqrt(a - ab) - np.sqrt(1.0 - ab) / a),
    )


def _solve_for_noise(
    x_t: np.ndarray, target: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule
) -> np.ndarray:
    carry, gain = ddim_transition(t, t_prev, schedule)
    if abs(gain) < _GAIN_FLOOR:
        raise ZeroDivisionError(f"oracle prediction gain vanished for t={t} -> {t_prev}")
    return (target - carry * x_t) / gain


def oracle_noise(
    pair: ScenePair, t: int, gap: int, noise: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """The unique prediction that lands the DDIM step exactly on the mix state.

    ``ddim_step(latent_t, oracle_noise(...), t, t - gap)`` equals the latent of
    the mix state at t - gap built from the same noise draw, for any
    1 <= gap <= t.  For gap = 1 this reduces to the OracleCoefficients
    identity.
    """
    gap = int(gap)
    if not 1 <= gap <= t:
        raise ValueError(f"need 1 <= gap <= t, got gap={gap}, t={t}")
    x_t = make_mix_state(pair, t, noise, schedule).latent
    target = make_mix_state(pair, t - gap, noise, schedule).latent
    return _solve_for_noise(x_t, target, t, t - gap, schedule)


def oracle_noise_from_state(
    latent: np.ndarray,
    pair: ScenePair,
    t: int,
    gap: int,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """State-feedback form of the oracle: solve from the actual current latent.

    Identical to ``oracle_noise`` when the latent sits on the mix trajectory;
    off-trajectory latents are steered back onto it in a single step.
    """
    gap = int(gap)
    if not 1 <= gap <= t:
        raise ValueError(f"need 1 <= gap <= t, got gap={gap}, t={t}")
    target = make_mix_state(pair, t - gap, noise, schedule).latent
    return _solve_for_noise(latent, target, t, t - gap, schedule)
