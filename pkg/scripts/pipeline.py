"""Two-stage pipeline: data, Stage I, importance, schedules, Stage II, evaluation sweeps.

    python3 scripts/pipeline.py --out runs/pipeline [--steps1 2000] [--steps2 400]

Writes checkpoints, heatmaps, schedules and a results.json with every
evaluation used by the pruning-strategy and retention-sweep experiments.
"""

from __future__ import annotations

import argparse
import json
import sys
from functools import partial
from pathlib import Path

from tricond.experiments import cliff_check, run_pipeline, strategy_wins, within_relative


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--train-count", type=int, default=256)
    ap.add_argument("--eval-count", type=int, default=256)
    ap.add_argument("--importance-count", type=int, default=64)
    ap.add_argument("--steps1", type=int, default=None)
    ap.add_argument("--steps2", type=int, default=None)
    ap.add_argument("--random-seeds", type=int, default=3)
    args = ap.parse_args(argv)
    log = partial(print, flush=True)
    res, _ = run_pipeline(out=args.out, train_count=args.train_count, eval_count=args.eval_count,
                          importance_count=args.importance_count, steps1=args.steps1,
                          steps2=args.steps2, random_seeds=args.random_seeds, log=log)
    log(json.dumps(res, indent=1))
    log("stage II within 10%:", within_relative(res["stage1"], res["stage2"]))
    log("importance wins per sweep point:", strategy_wins(res["strategies"]))
    log("retention cliff:", cliff_check(res["retention_sweep"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
