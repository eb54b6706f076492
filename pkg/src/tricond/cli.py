"""Command-line entry point: ``tricond <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or invalid input spec.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arraymath import ContractError
from .attention import AttentionMode, CacheInvalidError
from .synthdata import DatasetError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentRecipe:
    name: str
    description: str
    stage1_steps: int
    stage2_steps: int
    train_count: int
    eval_count: int
    bench_reps: int


RECIPES = {
    "smoke": ExperimentRecipe("smoke", "tiny step counts; checks the plumbing end to end",
                              20, 10, 16, 4, 5),
    "full": ExperimentRecipe("full", "256 posters, 2000 + 800 training steps, full sweeps",
                             2000, 800, 256, 256, 7),
}


def _read_json(path: Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path}: invalid JSON at line {exc.lineno}") from None


def _load_config(path):
    from .model import ModelConfig

    if path is None:
        return ModelConfig()
    try:
        return ModelConfig.from_dict(_read_json(path, "config"))
    except (ContractError, TypeError) as exc:
        raise UsageError(f"config {path}: {exc}") from None


def _load_samples(data: Path):
    from .synthdata import read_dataset

    return read_dataset(data)


def _load_ckpt(path: Path):
    from .model import load_checkpoint

    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_data_matches(config, samples):
    h, w = samples[0].poster.shape[:2]
    if (h, w) != (config.image_size, config.image_size):
        raise ContractError(f"dataset images are {h}x{w} but checkpoint config "
                            f"{config.fingerprint()} expects {config.image_size}")


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    from .synthdata import GenerationSpec, generate_dataset, write_dataset

    spec = GenerationSpec()
    if args.spec:
        try:
            spec = GenerationSpec.from_dict(_read_json(args.spec, "spec"))
        except ContractError as exc:
            raise UsageError(f"spec {args.spec}: {exc}") from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    write_dataset(args.out, generate_dataset(args.count, args.seed, spec), spec)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .importance import RoutingSchedule, load_importance
    from .model import save_checkpoint
    from .training import train_stage1, train_stage2

    if args.stage == 2 and not (args.schedule and args.importance and args.init):
        raise UsageError("stage 2 requires --schedule, --importance and --init")
    log = print if args.verbose else None
    if args.stage == 1:
        config = _load_config(args.config)
        samples = _load_samples(args.data)
        params, report = train_stage1(config, samples, args.steps, log=log,
                                      ckpt_dir=Path(args.out).parent)
    else:
        if not Path(args.schedule).exists():
            raise UsageError(f"schedule file not found: {args.schedule}")
        if not Path(args.importance).exists():
            raise UsageError(f"importance input not found: {args.importance}")
        params = _load_ckpt(args.init)
        if args.config:
            want = _load_config(args.config)
            if want != params.config:
                raise ContractError(f"config mismatch: --config {want.fingerprint()} vs "
                                    f"checkpoint {params.config.fingerprint()}")
        samples = _load_samples(args.data)
        _check_data_matches(params.config, samples)
        sched = RoutingSchedule.from_json(Path(args.schedule).read_text())
        imap = load_importance(args.importance)
        params, report = train_stage2(params, samples, sched, imap, args.steps, log=log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    out.with_suffix(".report.json").write_text(report.to_json())
    print(f"stage {args.stage}: loss {report.initial_loss:.4f} -> {report.final_loss:.4f}; wrote {out}")
    return EXIT_OK


def cmd_importance(args) -> int:
    from .importance import compute_importance, export_heatmaps
    from .model import prepare_batch

    params = _load_ckpt(args.ckpt)
    samples = _load_samples(args.data)
    _check_data_matches(params.config, samples)
    samples = samples[:args.count] if args.count else samples
    imap = compute_importance(params, prepare_batch(samples, params.config), args.mode)
    out = Path(args.out)
    export_heatmaps(imap, out)
    (out / "importance.json").write_text(imap.to_json())
    print(f"importance over {imap.sample_count} samples written to {out}")
    return EXIT_OK


def cmd_schedule(args) -> int:
    from .importance import baseline_schedule, derive_schedule, load_importance, parse_retain

    try:
        fractions = parse_retain(args.retain)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    if not Path(args.heatmaps).exists():
        raise UsageError(f"heatmaps not found: {args.heatmaps}")
    imap = load_importance(args.heatmaps)
    if args.kind == "importance":
        sched = derive_schedule(imap, fractions)
    else:
        sched = baseline_schedule(args.kind, fractions, imap.layers, imap.steps, args.seed)
    Path(args.out).write_text(sched.to_json())
    kept = {n: int(sched.keep[i].sum()) for i, n in enumerate(("style", "subject", "glyph"))}
    print(f"{args.kind} schedule {kept} of {imap.layers * imap.steps} slots -> {args.out}")
    return EXIT_OK


def _load_schedule(path, config):
    from .importance import RoutingSchedule

    if not path:
        return None
    if not Path(path).exists():
        raise UsageError(f"schedule file not found: {path}")
    sched = RoutingSchedule.from_json(Path(path).read_text())
    if sched.keep.shape[1:] != (config.layers, config.steps):
        raise ContractError(f"schedule grid {sched.keep.shape[1:]} does not match checkpoint "
                            f"config {config.fingerprint()} ({config.layers}, {config.steps})")
    return sched


def cmd_sample(args) -> int:
    from .model import prepare_batch, sample
    from .synthdata import encode_pnm

    params = _load_ckpt(args.ckpt)
    samples = _load_samples(args.data)
    _check_data_matches(params.config, samples)
    if not 0 <= args.sample_id < len(samples):
        raise UsageError(f"--sample-id {args.sample_id} outside dataset of {len(samples)}")
    sched = _load_schedule(args.schedule, params.config)
    batch = prepare_batch([samples[args.sample_id]], params.config)
    image = sample(params, batch, args.mode, sched, args.seed)[0]
    Path(args.out).write_bytes(encode_pnm(image))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .costmodel import dump_report, efficiency_report
    from .importance import DEFAULT_RETAIN, derive_schedule, load_importance
    from .model import prepare_batch

    params = _load_ckpt(args.ckpt)
    samples = _load_samples(args.data)
    _check_data_matches(params.config, samples)
    sched = _load_schedule(args.schedule, params.config)
    if sched is None and args.importance:
        sched = derive_schedule(load_importance(args.importance), DEFAULT_RETAIN)
    modes = [AttentionMode(m) for m in args.modes.split(",")]
    rows = [(m.value if m is not AttentionMode.DECOUPLED_CACHED else "decoupled_cached_pruned", m,
             sched if m is AttentionMode.DECOUPLED_CACHED else None) for m in modes]
    batch = prepare_batch(samples[:1], params.config)
    report = efficiency_report(params, batch, sched, args.reps, rows)
    Path(args.out).write_text(dump_report(report))
    for row in report["rows"]:
        print(f"{row['name']:>24}: {row['flops']['total']:>12d} FLOPs "
              f"({row['flops_reduction_pct']:.1f}% less), median {row['latency_s']['median']:.4f} s")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import gradient_check, tiny_config

    config = _load_config(args.config) if args.config else tiny_config()
    err = gradient_check(config, args.eps, args.samples, args.seed)
    ok = err < args.tol
    print(f"max relative error {err:.3e} over {args.samples} coordinates: {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_repro(args) -> int:
    """Chain every command of the two-stage pipeline under one output directory."""
    recipe = RECIPES[args.preset]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "config.json"
    from .model import ModelConfig

    config = ModelConfig(stage1_steps=recipe.stage1_steps, stage2_steps=recipe.stage2_steps)
    cfg.write_text(json.dumps(config.to_dict(), indent=1))
    steps = [
        ["gen-data", "--out", out / "train", "--count", recipe.train_count, "--seed", 0],
        ["gen-data", "--out", out / "eval", "--count", recipe.eval_count, "--seed", 10_000],
        ["train", "--config", cfg, "--data", out / "train", "--stage", 1, "--out", out / "stage1.ckpt"],
        ["importance", "--ckpt", out / "stage1.ckpt", "--data", out / "train", "--count", 64,
         "--out", out / "heatmaps"],
        ["schedule", "--heatmaps", out / "heatmaps", "--out", out / "schedule.json"],
        ["train", "--data", out / "train", "--stage", 2, "--init", out / "stage1.ckpt",
         "--schedule", out / "schedule.json", "--importance", out / "heatmaps" / "importance.json",
         "--out", out / "stage2.ckpt"],
        ["sample", "--ckpt", out / "stage2.ckpt", "--data", out / "eval", "--sample-id", 0,
         "--mode", "cached", "--schedule", out / "schedule.json", "--out", out / "sample0.ppm"],
        ["bench", "--ckpt", out / "stage2.ckpt", "--data", out / "eval", "--schedule",
         out / "schedule.json", "--reps", recipe.bench_reps, "--out", out / "bench.json"],
    ]
    for kind in ("uniform", "random"):
        steps.insert(5, ["schedule", "--heatmaps", out / "heatmaps", "--kind", kind, "--seed", 0,
                         "--out", out / f"schedule_{kind}.json"])
    for argv in steps:
        argv = [str(a) for a in argv]
        print("$ tricond " + " ".join(argv))
        code = main(argv)
        if code != EXIT_OK:
            return code
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    presets = "; ".join(f"{r.name}: {r.description}" for r in RECIPES.values())
    ap = argparse.ArgumentParser(prog="tricond", description=__doc__.splitlines()[0],
                                 epilog=f"repro presets -- {presets}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic poster dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", type=Path, help="generation spec JSON (defaults otherwise)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="stage 1 or stage 2 training")
    p.add_argument("--config", type=Path, help="model config JSON (defaults otherwise)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--init", type=Path, help="stage-1 checkpoint to fine-tune (stage 2)")
    p.add_argument("--schedule", type=Path, help="routing schedule JSON (stage 2)")
    p.add_argument("--importance", type=Path, help="importance JSON or heatmap dir (stage 2)")
    p.add_argument("--steps", type=int, help="override the config's step count")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("importance", help="attention importance heatmaps of a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--count", type=int, default=0, help="use only the first N samples")
    p.add_argument("--mode", choices=[m.value for m in AttentionMode][:2], default="decoupled")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("schedule", help="derive a routing schedule from heatmaps")
    p.add_argument("--heatmaps", type=Path, required=True, help="heatmap dir or importance JSON")
    p.add_argument("--retain", default="style=0.4,subject=0.5,glyph=0.2")
    p.add_argument("--kind", choices=("importance", "uniform", "random"), default="importance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sample", help="generate one poster as PPM")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset providing the conditions")
    p.add_argument("--sample-id", type=int, default=0)
    p.add_argument("--mode", choices=[m.value for m in AttentionMode], default="cached")
    p.add_argument("--schedule", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="analytic FLOPs and measured latency per mode")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--modes", default="full,decoupled,cached")
    p.add_argument("--schedule", type=Path, help="schedule for the cached row")
    p.add_argument("--importance", type=Path, help="derive the default schedule from this")
    p.add_argument("--reps", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the hand-written gradients")
    p.add_argument("--config", type=Path, help="model config JSON (tiny float64 config otherwise)")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("repro", help="run a whole pipeline preset")
    p.add_argument("--preset", choices=sorted(RECIPES), default="smoke")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_repro)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "bench" and args.reps < 5:
        print("tricond: error: --reps must be >= 5", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tricond {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, DatasetError, CacheInvalidError, OSError, ValueError,
            RuntimeError) as exc:
        print(f"tricond {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
