"""Finite-difference gradient suite over every primitive and both tiny models.

Prints the worst relative error per check and the ReLU/max-pool crossings skipped.
"""
from __future__ import annotations

import argparse
import sys

from threadpoolctl import threadpool_limits

from lesionforge.gradsuite import CHECKS, TOLERANCE, run_suite

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--only", action="append", choices=sorted(CHECKS))
    args = ap.parse_args()
    with threadpool_limits(1):
        res = run_suite(args.seed, args.trials, args.only)
    for name, err in res.worst.items():
        print(f"{name:<24} {err:.3e}  skipped {res.skipped[name]}")
    print(f"{'pass' if res.passed else 'FAIL'}: tolerance {TOLERANCE:g}, {res.trials} trials, {res.seconds:.1f}s")
    sys.exit(0 if res.passed else 1)
