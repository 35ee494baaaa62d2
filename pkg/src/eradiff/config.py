"""Run configuration: one nested document driving every command.

The on-disk format is JSON with exactly the sections below; unknown keys are
rejected so a typo cannot silently fall back to a default.  The canonical
serialization (sorted keys, no whitespace) is hashed and stamped into every
artifact a run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .model import DenoiserConfig
from .scenegen import SceneConfig
from .schedule import NoiseSchedule, build_schedule

OBJECTIVES = ("cro", "standard", "standard_bg")


class ConfigError(ValueError):
    pass


def _from_flat_dict(cls, d: dict, tuple_fields: tuple[str, ...] = ()):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    coerced = dict(d)
    for name in tuple_fields:
        if name in coerced:
            coerced[name] = tuple(coerced[name])
    return cls(**coerced)


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    T: int = 200
    beta_min: float = 5e-4
    beta_max: float = 0.05

    def build(self) -> NoiseSchedule:
        return build_schedule(self.kind, self.T, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "cro"
    gamma_max: int = 100
    mixup_enabled: bool = True
    mixup_level_const: float = 1.0
    batch_size: int = 16
    total_steps: int = 2000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 500

    def validate(self, T: int) -> "TrainConfig":
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 1 <= self.gamma_max < T:
            raise ConfigError(f"gamma_max must satisfy 1 <= gamma_max < T={T}, got {self.gamma_max}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")
        if not 0.0 <= self.mixup_level_const <= 1.0:
            raise ConfigError(f"mixup_level_const must be in [0, 1], got {self.mixup_level_const}")
        return self


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 20
    strength: float = 0.95
    seed: int = 0

    def validate(self) -> "SampleConfig":
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.strength <= 1.0:
            raise ConfigError(f"strength must be in (0, 1], got {self.strength}")
        return self


@dataclass(frozen=True)
class EvalConfig:
    n_scenes: int = 200
    scene_seed_base: int = 7_000_000  # held-out scenes: literal seeds base+i, disjoint
    grid_scenes: int = 4              # from the hashed seeds used while training


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    scene: SceneConfig = field(default_factory=SceneConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["scene"]["scale_range"] = list(self.scene.scale_range)
        d["scene"]["background_band"] = list(self.scene.background_band)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def validate(self) -> "RunConfig":
        self.scene.validate()
        self.model.validate()
        self.train.validate(self.schedule.T)
        self.sample.validate()
        if self.model.image_size != self.scene.size or self.model.image_channels != self.scene.channels:
            raise ConfigError(
                f"model geometry ({self.model.image_channels}x{self.model.image_size}) must match the "
                f"scene geometry ({self.scene.channels}x{self.scene.size})"
            )
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"RunConfig: unknown keys {sorted(unknown)}")
        kwargs: dict = {}
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if "out_dir" in d:
            kwargs["out_dir"] = str(d["out_dir"])
        if "scene" in d:
            kwargs["scene"] = _from_flat_dict(SceneConfig, d["scene"], ("scale_range", "background_band"))
        if "schedule" in d:
            kwargs["schedule"] = _from_flat_dict(ScheduleConfig, d["schedule"])
        if "model" in d:
            kwargs["model"] = _from_flat_dict(DenoiserConfig, d["model"], ("channel_mult",))
        if "train" in d:
            kwargs["train"] = _from_flat_dict(TrainConfig, d["train"])
        if "sample" in d:
            kwargs["sample"] = _from_flat_dict(SampleConfig, d["sample"])
        if "eval" in d:
            kwargs["eval"] = _from_flat_dict(EvalConfig, d["eval"])
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


def replace(cfg, **changes):
    """dataclasses.replace that re-validates RunConfig instances."""
    out = dataclasses.replace(cfg, **changes)
    if isinstance(out, RunConfig):
        out.validate()
    return out
