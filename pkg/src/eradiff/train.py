"""Training regimes: chain-rectified transition matching, the standard noise
objective with random or background-constrained masks, and the frozen-blend
(no-mix-up) ablation.

One training example for the chain-rectified objective draws a step t, a gap
in [1, min(gamma_max, t)], and a single noise tensor shared by both ends of
the transition; the loss is the squared distance between the true mix state
at t - gap and the deterministic reverse step taken from the state at t using
the model's noise prediction.  The reverse map is treated as differentiable
through the prediction only; its schedule coefficients are constants.

All randomness is keyed by (run seed, step index, sample index), so resuming
from a checkpoint replays the exact same draws and reproduces an
uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .diffusion import forward_noise, make_mix_state
from .model import DenoiserModel, build_denoiser
from .rng import derive_seed, stream, uniform_int
from .scenegen import (
    MaskSpec,
    ScenePair,
    background_constrained_mask,
    generate_scene,
    random_mask,
    sample_mask_spec,
)
from .schedule import NoiseSchedule
from .tensor import AdamState, Tape, Tensor, adam_step, backward


@dataclass
class SampleDraw:
    """Per-example randomness: step index, transition gap, noise, mask spec."""

    t: int
    gap: int
    noise: np.ndarray
    mask_spec: MaskSpec | None = None


@dataclass
class StepResult:
    loss: float
    nan_flag: bool
    stepped: bool
    draws: list[SampleDraw]


@dataclass
class TrainLogRecord:
    step: int
    loss: float
    t: int
    gap: int
    nan_flag: bool
    seconds: float


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    records: list[TrainLogRecord]
    config_hash: str
    nan_count: int


def derive_draws(
    run_seed: int,
    step_index: int,
    batch_size: int,
    schedule: NoiseSchedule,
    gamma_max: int,
    shape: tuple[int, ...],
) -> list[SampleDraw]:
    draws = []
    for i in range(batch_size):
        rng = stream(run_seed, "draw", step_index, i)
        t = uniform_int(rng, 1, schedule.T)
        gap = uniform_int(rng, 1, min(gamma_max, t))
        noise = rng.standard_normal(shape)
        spec = sample_mask_spec(rng, shape[-1])
        draws.append(SampleDraw(t=t, gap=gap, noise=noise, mask_spec=spec))
    return draws


def predicted_prev_state(
    latent: Tensor, noise_pred: Tensor, t: int, t_prev: int, schedule: NoiseSchedule
) -> Tensor:
    """Deterministic reverse step as a differentiable function of the prediction."""
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    x0_est = tz.scale(tz.add(latent, tz.scale(noise_pred, -np.sqrt(1.0 - ab_t))), 1.0 / np.sqrt(ab_t))
    return tz.add(tz.scale(x0_est, np.sqrt(ab_p)), tz.scale(noise_pred, np.sqrt(1.0 - ab_p)))


def _mse_to(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = tz.add(pred, Tensor(np.ascontiguousarray(-target, dtype=pred.dtype)))
    return tz.mean(tz.mul(diff, diff))


def _finish_step(model, opt, loss_t, draws) -> StepResult:
    loss = float(loss_t.data)
    nan = not np.isfinite(loss)
    stepped = False
    if model is not None and opt is not None and not nan:
        backward(loss_t)
        params = model.param_tensors()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if all(np.all(np.isfinite(g)) for g in grads):
            adam_step(params, grads, opt)
            stepped = True
        else:
            nan = True
    if model is not None:
        model.zero_grads()
    return StepResult(loss=loss, nan_flag=nan, stepped=stepped, draws=draws)


def cro_step(
    model: DenoiserModel | None,
    batch: list[ScenePair],
    schedule: NoiseSchedule,
    config: TrainConfig,
    opt: AdamState | None,
    *,
    run_seed: int = 0,
    step_index: int = 0,
    draws: list[SampleDraw] | None = None,
    predictor=None,
    level_override: float | None = None,
) -> StepResult:
    """One chain-rectified update over the batch.

    ``predictor(pair, draw) -> ndarray`` substitutes for the network (the
    closed-form oracle in tests); the substituted prediction flows through the
    identical reverse-step and loss assembly, and no optimizer step is taken.
    """
    if not batch:
        raise ValueError("empty batch")
    dt = model.dtype if model is not None else np.dtype(np.float64)
    if draws is None:
        draws = derive_draws(run_seed, step_index, len(batch), schedule, config.gamma_max,
                             batch[0].background.shape)
    total = None
    with Tape():
        for pair, d in zip(batch, draws):
            state_t = make_mix_state(pair, d.t, d.noise, schedule, level_override)
            state_prev = make_mix_state(pair, d.t - d.gap, d.noise, schedule, level_override)
            latent = Tensor(state_t.latent.astype(dt))
            if predictor is not None:
                noise_pred = Tensor(np.asarray(predictor(pair, d)).astype(dt))
            else:
                noise_pred = model.predict_noise(
                    latent, pair.mask, pair.masked_image(pair.background).astype(dt), d.t
                )
            pred_prev = predicted_prev_state(latent, noise_pred, d.t, d.t - d.gap, schedule)
            term = _mse_to(pred_prev, state_prev.latent.astype(dt))
            total = term if total is None else tz.add(total, term)
        loss_t = tz.scale(total, 1.0 / len(batch))
        return _finish_step(None if predictor is not None else model, opt, loss_t, draws)


def no_mixup_step(
    model: DenoiserModel | None,
    batch: list[ScenePair],
    schedule: NoiseSchedule,
    config: TrainConfig,
    opt: AdamState | None,
    **kwargs,
) -> StepResult:
    """Frozen-blend ablation: the chain-rectified step with a constant blend
    weight for every t >= 1 (the t = 0 state stays the exact background).

    Non-finite losses are recorded, never raised; the optimizer step is
    skipped for that batch and the run continues.
    """
    if config.mixup_enabled:
        raise ValueError("no_mixup_step requires mixup_enabled=False")
    return cro_step(
        model, batch, schedule, config, opt,
        level_override=config.mixup_level_const, **kwargs,
    )


def standard_step(
    model: DenoiserModel | None,
    batch: list[ScenePair],
    schedule: NoiseSchedule,
    config: TrainConfig,
    opt: AdamState | None,
    *,
    mask_source: str = "random",
    run_seed: int = 0,
    step_index: int = 0,
    draws: list[SampleDraw] | None = None,
    predictor=None,
) -> StepResult:
    """Standard noise-prediction objective on the background images.

    ``mask_source`` picks the conditioning masks: "random" draws from the
    rectangle/ellipse/irregular/combined families, "background_constrained"
    additionally forces zero overlap with the scene's object footprint.
    """
    if mask_source not in ("random", "background_constrained"):
        raise ValueError(f"mask_source must be 'random' or 'background_constrained', got {mask_source!r}")
    if not batch:
        raise ValueError("empty batch")
    dt = model.dtype if model is not None else np.dtype(np.float64)
    size = batch[0].mask.shape[0]
    if draws is None:
        draws = derive_draws(run_seed, step_index, len(batch), schedule, config.gamma_max,
                             batch[0].background.shape)
    total = None
    with Tape():
        for pair, d in zip(batch, draws):
            if mask_source == "random":
                mask = random_mask(d.mask_spec, size)
            else:
                mask = background_constrained_mask(pair, d.mask_spec)
            latent_np = forward_noise(pair.background, d.t, d.noise, schedule)
            if predictor is not None:
                noise_pred = Tensor(np.asarray(predictor(pair, d)).astype(dt))
            else:
                noise_pred = model.predict_noise(
                    Tensor(latent_np.astype(dt)), mask,
                    (pair.background * (1.0 - mask)[None]).astype(dt), d.t,
                )
            term = _mse_to(noise_pred, d.noise.astype(dt))
            total = term if total is None else tz.add(total, term)
        loss_t = tz.scale(total, 1.0 / len(batch))
        return _finish_step(None if predictor is not None else model, opt, loss_t, draws)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def _dispatch_step(model, batch, schedule, cfg: RunConfig, opt, step_index) -> StepResult:
    tc = cfg.train
    common = dict(run_seed=cfg.seed, step_index=step_index)
    if tc.objective == "cro" and tc.mixup_enabled:
        return cro_step(model, batch, schedule, tc, opt, **common)
    if tc.objective == "cro":
        return no_mixup_step(model, batch, schedule, tc, opt, **common)
    source = "random" if tc.objective == "standard" else "background_constrained"
    return standard_step(model, batch, schedule, tc, opt, mask_source=source, **common)


def write_log_csv(records: list[TrainLogRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "t", "gamma", "nan_flag", "seconds"])
        for r in records:
            writer.writerow([r.step, f"{r.loss:.10g}", r.t, r.gap, int(r.nan_flag), f"{r.seconds:.4f}"])


def train_run(
    cfg: RunConfig,
    out_dir=None,
    resume_from=None,
    progress=None,
) -> TrainResult:
    """Run the configured objective to total_steps with periodic checkpoints.

    Fully determined by (config, seed): two runs produce byte-identical final
    checkpoints, and resuming a checkpoint at step k reproduces the
    uninterrupted run exactly (optimizer state travels in the checkpoint).
    """
    cfg = cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule.build()
    tc = cfg.train
    meta = {"config_hash": cfg.config_hash(), "objective": tc.objective, "run_seed": cfg.seed}

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config != cfg.model:
            raise ValueError("resume checkpoint was built for a different model config")
        model = ck.build_model()
        opt = ck.adam
        if opt is None:
            raise ValueError("resume checkpoint has no optimizer state")
        start = ck.step
    else:
        model = build_denoiser(cfg.model, seed=derive_seed(cfg.seed, "model"))
        opt = AdamState.for_params(
            model.param_tensors(), lr=tc.lr,
            beta1=tc.adam_beta1, beta2=tc.adam_beta2, eps=tc.adam_eps,
        )
        start = 0

    records: list[TrainLogRecord] = []
    for step in range(start, tc.total_steps):
        t0 = time.perf_counter()
        batch = [
            generate_scene(derive_seed(cfg.seed, "scene", step, i), cfg.scene)
            for i in range(tc.batch_size)
        ]
        res = _dispatch_step(model, batch, schedule, cfg, opt, step)
        seconds = time.perf_counter() - t0
        records.append(TrainLogRecord(
            step=step, loss=res.loss, t=res.draws[0].t, gap=res.draws[0].gap,
            nan_flag=res.nan_flag, seconds=seconds,
        ))
        if progress is not None:
            progress(records[-1])
        if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0 and (step + 1) < tc.total_steps:
            save_checkpoint(out / f"checkpoint_{step + 1:06d}.ckpt", model, step + 1, opt, meta)

    final_path = out / "checkpoint_final.ckpt"
    save_checkpoint(final_path, model, tc.total_steps, opt, meta)
    log_path = out / "train_log.csv"
    write_log_csv(records, log_path)
    return TrainResult(
        checkpoint_path=str(final_path), log_path=str(log_path), records=records,
        config_hash=cfg.config_hash(), nan_count=sum(r.nan_flag for r in records),
    )
