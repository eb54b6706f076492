"""Efficiency report on the default config: FLOPs per mode plus interleaved latency.

    python3 scripts/bench.py [--ckpt runs/pipeline/stage1.ckpt] [--reps 9]

Without a checkpoint the freshly initialised weights are used; latency does
not depend on weight values, only on which condition slots are kept.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from tricond.costmodel import dump_report, efficiency_report
from tricond.importance import compute_importance, derive_schedule
from tricond.model import ModelConfig, ModelParams, load_checkpoint, prepare_batch
from tricond.synthdata import generate_dataset


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", type=Path)
    ap.add_argument("--reps", type=int, default=9)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args(argv)
    params = load_checkpoint(args.ckpt) if args.ckpt else ModelParams.init(ModelConfig())
    samples = generate_dataset(8, 0)
    imap = compute_importance(params, prepare_batch(samples, params.config))
    batch = prepare_batch(samples[:1], params.config)
    report = efficiency_report(params, batch, derive_schedule(imap), args.reps)
    text = dump_report(report)
    if args.out:
        args.out.write_text(text)
    for row in report["rows"]:
        print(f"{row['name']:>24}: {row['flops']['total']:>12d} FLOPs "
              f"({row['flops_reduction_pct']:5.1f}% less)  median {row['latency_s']['median']:.4f} s "
              f"iqr {row['latency_s']['iqr']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
