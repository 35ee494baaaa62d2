"""Single executable over the full pipeline.

Subcommands: synth, train, sample, eval, ablate, oracle-check.  Every command
is reproducible from (config file, seed) alone; flags override file values,
and each artifact directory gets a manifest stamped with the config hash.
Exit codes: 0 success, 1 check/runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .checkpoint import CheckpointError, load_model
from .config import ConfigError, RunConfig, replace
from .diffusion import ddim_step, make_mix_state, oracle_coefficients, oracle_noise
from .pngio import load_image, load_mask, save_image, save_mask
from .rng import derive_seed, stream
from .sampler import ModelDenoiser, OracleDenoiser, SamplerError, erase_sample
from .scenegen import SceneError, generate_scene
from .train import train_run


def _worker_count(n_jobs: int) -> int:
    cap = os.environ.get("ERADIFF_THREADS")
    workers = os.cpu_count() or 1
    if cap:
        workers = max(1, int(cap))
    return max(1, min(workers, n_jobs))


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "objective", None) is not None:
        cfg = replace(cfg, train=dataclasses.replace(cfg.train, objective=args.objective))
    if getattr(args, "sra", None) is not None:
        cfg = replace(cfg, model=dataclasses.replace(cfg.model, sra_enabled=args.sra == "on"))
    sample_changes = {}
    if getattr(args, "strength", None) is not None:
        sample_changes["strength"] = args.strength
    if getattr(args, "steps", None) is not None:
        sample_changes["steps"] = args.steps
    if sample_changes:
        cfg = replace(cfg, sample=dataclasses.replace(cfg.sample, **sample_changes))
    return cfg.validate()


def _write_manifest(out: Path, cfg: RunConfig, payload: dict) -> None:
    doc = {"config_hash": cfg.config_hash(), "seed": cfg.seed, **payload}
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir) / "scenes"
    out.mkdir(parents=True, exist_ok=True)
    seeds = [derive_seed(cfg.seed, "synth", i) for i in range(args.n)]

    def build(seed: int) -> dict:
        pair = generate_scene(seed, cfg.scene)
        stem = out / f"scene_{seed:020d}"
        save_image(f"{stem}_background.png", pair.background)
        save_image(f"{stem}_composite.png", pair.composite)
        save_mask(f"{stem}_mask.png", pair.mask)
        sidecar = {"transform": pair.log.to_dict(), "config_hash": cfg.config_hash()}
        Path(f"{stem}_transform.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
        return {
            "seed": seed,
            "background": f"scenes/{stem.name}_background.png",
            "composite": f"scenes/{stem.name}_composite.png",
            "mask": f"scenes/{stem.name}_mask.png",
            "transform": f"scenes/{stem.name}_transform.json",
        }

    if seeds:
        with ThreadPoolExecutor(max_workers=_worker_count(len(seeds))) as pool:
            entries = list(pool.map(build, seeds))
    else:
        entries = []
    _write_manifest(Path(cfg.out_dir), cfg, {"n_scenes": args.n, "entries": entries})
    print(f"wrote {args.n} scene pair(s) under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    last = {"step": -1}

    def progress(rec):
        last["step"] = rec.step
        if rec.step % max(1, cfg.train.total_steps // 20) == 0:
            print(f"step {rec.step:6d}  loss {rec.loss:.6f}", flush=True)

    result = train_run(cfg, resume_from=args.resume, progress=progress)
    _write_manifest(Path(cfg.out_dir), cfg, {
        "checkpoint": result.checkpoint_path, "log": result.log_path,
        "objective": cfg.train.objective, "nan_count": result.nan_count,
    })
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"training log:     {result.log_path}")
    return 0


def _resolve_scene_input(args, cfg: RunConfig):
    if args.scene_seed is not None:
        pair = generate_scene(args.scene_seed, cfg.scene)
        return pair.composite, pair.mask, pair
    if not (args.input and args.mask):
        raise SamplerError("provide either --scene-seed or both --input and --mask")
    return load_image(args.input), load_mask(args.mask), None


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule.build()
    image, mask, pair = _resolve_scene_input(args, cfg)

    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
        if getattr(args, "sra", None) is not None:
            model.sra_enabled = args.sra == "on"
        denoiser = ModelDenoiser(model)
    else:
        if pair is None:
            raise SamplerError("the oracle denoiser needs --scene-seed (ground truth required)")
        denoiser = OracleDenoiser(pair, schedule)

    result = erase_sample(denoiser, image, mask, cfg.sample, schedule)
    save_image(out / "erased.png", result.output)
    files = {"output": "erased.png"}
    if args.dump_trajectory:
        traj_dir = out / "trajectory"
        traj_dir.mkdir(exist_ok=True)
        for i, state in enumerate(result.trajectory):
            save_image(traj_dir / f"state_{i:03d}_t{int(result.grid[i]):04d}.png",
                       np.clip(state, 0.0, 1.0))
        files["trajectory"] = "trajectory/"
    _write_manifest(out, cfg, {
        "strength": cfg.sample.strength, "steps": cfg.sample.steps,
        "t_start": result.t_start, "grid": [int(t) for t in result.grid],
        "denoiser": args.checkpoint or "oracle", "files": files,
    })
    print(f"erased image: {out / 'erased.png'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule.build()
    model, _ = load_model(args.checkpoint)
    if getattr(args, "sra", None) is not None:
        model.sra_enabled = args.sra == "on"
    scenes = ev.held_out_scenes(cfg, args.n or cfg.eval.n_scenes)
    report = ev.evaluate_denoiser(
        ModelDenoiser(model), scenes, cfg.sample, schedule,
        checkpoint_id=args.checkpoint, config_hash=cfg.config_hash(),
    )
    ev.write_report_csv(report, out / "eval_report.csv")
    denoiser = ModelDenoiser(model)
    for pair in scenes[: cfg.eval.grid_scenes]:
        result = erase_sample(denoiser, pair.composite, pair.mask,
                              dataclasses.replace(cfg.sample, seed=derive_seed(cfg.sample.seed, "eval", pair.seed)),
                              schedule)
        ev.save_qualitative_grid(pair, result.output, out / f"grid_{pair.seed}.png")
    _write_manifest(out, cfg, {
        "report": "eval_report.csv", "n_scenes": report.n_scenes,
        "elimination_rate": report.elimination_rate, "mean_psnr": report.mean_psnr,
    })
    print(f"elimination rate: {report.elimination_rate:.4f}  mean PSNR: {report.mean_psnr:.2f} dB")
    print(f"report: {out / 'eval_report.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"{row.variant:<14} elimination={row.elimination_rate:.4f} "
              f"psnr={row.mean_psnr:.2f} nan={row.nan_count} unstable={row.unstable}", flush=True)

    rows = ev.run_ablation(cfg, args.n or cfg.eval.n_scenes,
                           train_missing=not args.require_checkpoints, progress=progress)
    ev.write_ablation_csv(rows, out / "ablation.csv", config_hash=cfg.config_hash())
    _write_manifest(out, cfg, {"table": "ablation.csv",
                               "variants": [r.variant for r in rows]})
    print(f"ablation table: {out / 'ablation.csv'}")
    return 0


def cmd_oracle_check(args) -> int:
    cfg = _load_config(args)
    schedule = cfg.schedule.build()
    corrupt = args.corrupt_coefficient
    print(f"schedule: kind={schedule.kind} T={schedule.T} beta=[{schedule.beta_min}, {schedule.beta_max}]")

    worst_identity, worst_at = 0.0, (0, 0)
    for trial in range(args.trials):
        seed = derive_seed(cfg.seed, "oracle_check", trial)
        pair = generate_scene(seed, cfg.scene)
        rng = stream(seed, "oracle_noise")
        t = 1 + int(rng.random() * schedule.T)
        noise = rng.standard_normal(pair.background.shape)
        coeffs = oracle_coefficients(t, schedule)
        object_coef = coeffs.object_coef * (1.01 if corrupt == "B" else 1.0)
        pred = oracle_noise(pair, t, 1, noise, schedule)
        lhs = coeffs.prediction_gain * pred
        rhs = (coeffs.state_coef * make_mix_state(pair, t, noise, schedule).latent
               + object_coef * pair.composite + coeffs.noise_coef * noise)
        rel = float(np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(lhs)), 1e-300))
        if rel > worst_identity:
            worst_identity, worst_at = rel, (t, seed)

    pair = generate_scene(derive_seed(cfg.seed, "oracle_check", "rollout"), cfg.scene)
    rng = stream(cfg.seed, "oracle_rollout")
    noise = rng.standard_normal(pair.background.shape)

    worst_comp = 0.0
    for t in range(2, schedule.T + 1, max(1, schedule.T // 37)):
        one = ddim_step(make_mix_state(pair, t, noise, schedule).latent,
                        oracle_noise(pair, t, 1, noise, schedule), t, t - 1, schedule)
        two = ddim_step(one, oracle_noise(pair, t - 1, 1, noise, schedule), t - 1, t - 2, schedule)
        direct = ddim_step(make_mix_state(pair, t, noise, schedule).latent,
                           oracle_noise(pair, t, 2, noise, schedule), t, t - 2, schedule)
        worst_comp = max(worst_comp, float(np.max(np.abs(two - direct))))

    x = make_mix_state(pair, schedule.T, noise, schedule).latent
    for t in range(schedule.T, 0, -1):
        x = ddim_step(x, oracle_noise(pair, t, 1, noise, schedule), t, t - 1, schedule)
    rollout_err = float(np.max(np.abs(x - pair.background)))

    print(f"identity max rel err:     {worst_identity:.3e}  (tolerance 1e-10)")
    print(f"gap-composition max err:  {worst_comp:.3e}  (tolerance 1e-9)")
    print(f"full rollout max-abs err: {rollout_err:.3e}  (tolerance 1e-6)")
    if worst_identity >= 1e-10:
        print(f"FAIL: identity breach at t={worst_at[0]} seed={worst_at[1]}", file=sys.stderr)
        return 1
    if worst_comp >= 1e-9 or rollout_err >= 1e-6:
        print("FAIL: rollout or composition tolerance breached", file=sys.stderr)
        return 1
    print("PASS")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eradiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_sample_flags=False):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="override the output directory")
        if with_sample_flags:
            p.add_argument("--strength", type=float, help="noise horizon fraction (default 0.95)")
            p.add_argument("--steps", type=int, help="denoising steps (default 20)")
            p.add_argument("--sra", choices=["on", "off"], help="toggle hole-suppressing attention")

    p = sub.add_parser("synth", help="write scene pairs as PNG triplets + JSON sidecars")
    common(p)
    p.add_argument("--n", type=int, default=16, help="number of scenes")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the configured objective")
    common(p)
    p.add_argument("--objective", choices=["cro", "standard", "standard_bg"])
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="erase the masked region of one image")
    common(p, with_sample_flags=True)
    p.add_argument("--checkpoint", help="model checkpoint (omit to use the closed-form oracle)")
    p.add_argument("--scene-seed", type=int, help="synthesize the input scene from this seed")
    p.add_argument("--input", help="input image PNG")
    p.add_argument("--mask", help="binary mask PNG (white = erase)")
    p.add_argument("--dump-trajectory", action="store_true")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on held-out scenes")
    common(p, with_sample_flags=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, help="number of held-out scenes")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the objective-x-attention variant table")
    common(p)
    p.add_argument("--n", type=int, help="number of held-out scenes")
    p.add_argument("--require-checkpoints", action="store_true",
                   help="fail instead of training when a variant checkpoint is missing")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("oracle-check", help="closed-form identity, composition, and rollout checks")
    common(p)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--corrupt-coefficient", choices=["none", "B"], default="none",
                   help="negative-control hook: corrupt one coefficient and expect failure")
    p.set_defaults(fn=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SceneError as exc:
        print(f"scenegen error: {exc}", file=sys.stderr)
        return 1
    except SamplerError as exc:
        print(f"sampler error: {exc}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
