"""Run the three-phase pipeline on the synthetic desk set and print the phase comparison.

    python scripts/run_desk_hybrid.py --out runs/desk --seed 7
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from lesionforge.cli import main

DESK = Path(__file__).with_name("desk.cfg")

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk_hybrid")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--config", default=str(DESK))
    args, extra = ap.parse_known_args()
    argv = ["hybrid", "--config", args.config, "--out", args.out, *extra]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    sys.exit(main(argv))
