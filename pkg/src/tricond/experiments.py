"""Experiment drivers shared by ``scripts/`` and the acceptance tests.

Each driver returns plain dicts of metric values so results can be dumped
to JSON and judged by the ``check_*`` helpers without re-running anything.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np

from .importance import (baseline_schedule, compute_importance, derive_schedule, export_heatmaps,
                         retention_from_pruning, uniform_fractions)
from .model import ModelConfig, prepare_batch, save_checkpoint
from .synthdata import generate_dataset
from .training import EVAL_SEED_BASE, HIGHER_IS_BETTER, evaluate, train_stage1, train_stage2

SWEEP = (0.7, 0.5, 0.3, 0.1)
PRUNING_ROWS = ((0, 0, 0), (50, 20, 30), (80, 50, 60), (90, 60, 70))


def run_pipeline(config: ModelConfig | None = None, out: Path | None = None, train_count: int = 256,
                 eval_count: int = 256, importance_count: int = 64, steps1: int | None = None,
                 steps2: int | None = None, random_seeds: int = 3,
                 log: Callable | None = None) -> tuple[dict, dict]:
    """Stage I, importance, default schedule, Stage II, then both schedule sweeps.

    The strategy sweep runs on the Stage I weights, so every strategy sees the
    same model. Each retention-sweep row is fine-tuned under its own schedule
    with the Stage II budget, as the default schedule is. Returns ``(results, artifacts)``; artifacts hold the live objects.
    """
    config = config or ModelConfig()
    train = generate_dataset(train_count, 0)
    evalset = prepare_batch(generate_dataset(eval_count, EVAL_SEED_BASE), config)

    p1, r1 = train_stage1(config, train, steps1, log=log)
    imap = compute_importance(p1, prepare_batch(train[:importance_count], config))
    sched = derive_schedule(imap)
    p2, r2 = train_stage2(p1, train, sched, imap, steps2, log=log)

    res = {"stage1_loss": [r1.initial_loss, r1.final_loss], "stage2_loss": r2.final_loss,
           "stage1": evaluate(p1, evalset), "stage2": evaluate(p2, evalset, schedule=sched),
           "stage1_pruned": evaluate(p1, evalset, schedule=sched)}
    B, T = config.layers, config.steps
    strat = {}
    for f in SWEEP:
        fr = uniform_fractions(f)
        strat[str(f)] = {
            "importance": evaluate(p1, evalset, schedule=derive_schedule(imap, fr)),
            "uniform": evaluate(p1, evalset, schedule=baseline_schedule("uniform", fr, B, T)),
            "random": [evaluate(p1, evalset, schedule=baseline_schedule("random", fr, B, T, s))
                       for s in range(random_seeds)]}
        if log:
            log(f"retain {f}: {json.dumps(strat[str(f)])}")
    res["strategies"] = strat
    sweep = {}
    for r in PRUNING_ROWS:
        s = derive_schedule(imap, retention_from_pruning(*r))
        pr = p2 if np.array_equal(s.keep, sched.keep) else train_stage2(p1, train, s, imap, steps2)[0]
        sweep[str(list(r))] = evaluate(pr, evalset, schedule=s)
        if log:
            log(f"prune {list(r)}: {json.dumps(sweep[str(list(r))])}")
    res["retention_sweep"] = sweep

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(p1, out / "stage1.ckpt")
        save_checkpoint(p2, out / "stage2.ckpt")
        (out / "stage1_report.json").write_text(r1.to_json())
        (out / "stage2_report.json").write_text(r2.to_json())
        (out / "importance.json").write_text(imap.to_json())
        export_heatmaps(imap, out / "heatmaps")
        (out / "schedule.json").write_text(sched.to_json())
        (out / "results.json").write_text(json.dumps(res, indent=1))
    arts = {"stage1": p1, "stage2": p2, "importance": imap, "schedule": sched, "eval": evalset,
            "reports": (r1, r2)}
    return res, arts


def tfem_ablation(seeds=(7, 8, 9), steps: int = 1500, train_count: int = 256, eval_count: int = 256,
                  log: Callable | None = None) -> list[dict]:
    """Paired runs with and without glyph crops (the enhancement input) per seed."""
    train = generate_dataset(train_count, 0)
    evals = generate_dataset(eval_count, EVAL_SEED_BASE)
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for name, crops in (("with", True), ("without", False)):
            cfg = ModelConfig(seed=seed, use_crops=crops)
            params, rep = train_stage1(cfg, train, steps)
            row[name] = evaluate(params, prepare_batch(evals, cfg))
            row[name]["final_loss"] = rep.final_loss
        rows.append(row)
        if log:
            log(json.dumps(row))
    return rows


# ------------------------------------------------------------------ judging

def _better_or_equal(a: float, b: float, metric: str) -> bool:
    return a >= b if HIGHER_IS_BETTER[metric] else a <= b


def within_relative(ref: dict, other: dict, tol: float = 0.1) -> dict:
    """Per metric: is ``other`` within ``tol`` relative of ``ref``."""
    return {m: abs(other[m] - ref[m]) <= tol * abs(ref[m]) for m in HIGHER_IS_BETTER}


def strategy_wins(strategies: dict, metrics=("glyph_acc", "subject_mse")) -> dict:
    """Per sweep point: importance matches or beats uniform and the random mean on ``metrics``."""
    wins = {}
    for f, row in strategies.items():
        rand = {m: float(np.mean([r[m] for r in row["random"]])) for m in metrics}
        wins[f] = all(_better_or_equal(row["importance"][m], row["uniform"][m], m)
                      and _better_or_equal(row["importance"][m], rand[m], m) for m in metrics)
    return wins


def cliff_check(sweep: dict, metrics=tuple(HIGHER_IS_BETTER)) -> dict:
    """Monotone non-improvement along the pruning rows and where the glyph drop is largest."""
    rows = list(sweep.values())
    monotone = {m: all(_better_or_equal(a[m], b[m], m) for a, b in zip(rows, rows[1:]))
                for m in metrics}
    drops = [a["glyph_acc"] - b["glyph_acc"] for a, b in zip(rows, rows[1:])]
    return {"monotone": monotone, "glyph_drops": drops,
            "last_drop_largest": int(np.argmax(drops)) == len(drops) - 1}


def tfem_wins(rows: list[dict]) -> list[bool]:
    return [r["with"]["glyph_acc"] > r["without"]["glyph_acc"] for r in rows]
