"""Glyph-enhancement ablation: paired Stage I runs with and without glyph crops.

    python3 scripts/tfem_ablation.py --out runs/tfem.json [--steps 1500] [--seeds 7 8 9]
"""

from __future__ import annotations

import argparse
import json
import sys
from functools import partial
from pathlib import Path

from tricond.experiments import tfem_ablation, tfem_wins


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9])
    args = ap.parse_args(argv)
    rows = tfem_ablation(tuple(args.seeds), args.steps, log=partial(print, flush=True))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=1))
    print("with > without per seed:", tfem_wins(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
