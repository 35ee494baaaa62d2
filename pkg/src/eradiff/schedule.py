"""Noise-schedule tables for a fixed horizon, plus the mix-level schedule.

The mix level at step t is defined as 1 - alpha_bar[t]: zero at t=0 (clean
background image) and close to one at t=T (object image dominates).  The
reverse process is deterministic, so the per-step sigma table is all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")

DEFAULT_T = 200
DEFAULT_BETA_MIN = 5e-4
DEFAULT_BETA_MAX = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha_bar/mix-level tables.

    ``beta[t-1]`` and ``alpha[t-1]`` hold the step-t values for t in 1..T;
    ``alpha_bar[t]`` and ``mix_level[t]`` are indexed directly by t in 0..T
    with alpha_bar[0] = 1 so that t = 0 states are exact images.
    """

    kind: str
    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    mix_level: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def _check_t(self, t: int, lo: int) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} out of range [{lo}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t, 1) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t, 1) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t, 0)])

    def mix_level_at(self, t: int) -> float:
        """Blend weight toward the object image; exactly 1 - alpha_bar[t]."""
        return float(self.mix_level[self._check_t(t, 0)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(**d)


def build_schedule(
    kind: str = "linear",
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    """Construct the tables; rebuilding from (kind, T, bounds) is bit-stable."""
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; valid: {SCHEDULE_KINDS}")
    T = int(T)
    if T < 2:
        raise ValueError(f"horizon must be at least 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")

    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    else:
        # squared-cosine alpha_bar proposal, then betas clipped to the bounds
        s = 0.008
        grid = np.arange(T + 1, dtype=np.float64) / T
        ab = np.cos((grid + s) / (1.0 + s) * np.pi / 2.0) ** 2
        ab /= ab[0]
        beta = np.clip(1.0 - ab[1:] / ab[:-1], beta_min, beta_max)

    alpha = 1.0 - beta
    alpha_bar = np.concatenate(([1.0], np.cumprod(alpha)))
    mix_level = 1.0 - alpha_bar
    sched = NoiseSchedule(
        kind=kind, T=T, beta_min=float(beta_min), beta_max=float(beta_max),
        beta=beta, alpha=alpha, alpha_bar=alpha_bar, mix_level=mix_level,
        sigma=np.zeros(T, dtype=np.float64),
    )
    _validate(sched)
    return sched


def _validate(s: NoiseSchedule) -> None:
    if not (np.all(s.beta > 0.0) and np.all(s.beta < 1.0)):
        raise ValueError("beta values must lie strictly inside (0, 1)")
    if s.alpha_bar[0] != 1.0:
        raise ValueError("alpha_bar[0] must be exactly 1")
    if not np.all(np.diff(s.alpha_bar) < 0.0):
        raise ValueError("alpha_bar must be strictly decreasing")
    if s.mix_level[0] != 0.0 or not np.all(np.diff(s.mix_level) > 0.0):
        raise ValueError("mix level must start at 0 and increase strictly")
