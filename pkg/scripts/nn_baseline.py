"""Pixel-space 1-nearest-neighbour accuracy on the synthetic set.

A sanity floor for the generator: the classes should be separable without
any learning, so a trained classifier that lands far below this is broken.
"""
from __future__ import annotations

import argparse

from lesionforge import DEFAULT_SEED
from lesionforge.data import nearest_neighbor_accuracy, stratified_split, synth_generate

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-per-class", type=int, default=100)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seeds", type=int, nargs="+", default=[DEFAULT_SEED, 1, 2])
    args = ap.parse_args()
    for seed in args.seeds:
        ds = synth_generate(args.n_per_class, (args.size, args.size), seed)
        train, test = stratified_split(ds, 0.2, seed)
        print(f"seed {seed}: 1-NN accuracy {nearest_neighbor_accuracy(train, test):.4f} on {len(test)} test images")
