"""Write tests/data/predict_golden.ltd: eval-mode class probabilities of a seeded tiny classifier.

Input and weights are fixed by seeds; regenerate only when the forward path is
deliberately changed.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from lesionforge.models import ResNetConfig, build_resnet, predict
from lesionforge.tensor import save_tensor

MODEL_SEED = 123
INPUT_SEED = 7


def golden_input() -> np.ndarray:
    return np.random.default_rng(INPUT_SEED).standard_normal((3, 3, 32, 32)).astype(np.float32)


def golden_probs() -> np.ndarray:
    graph = build_resnet(ResNetConfig.preset("tiny"), seed=MODEL_SEED)
    probs, _ = predict(graph, golden_input())
    return probs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "predict_golden.ltd"))
    args = ap.parse_args()
    with threadpool_limits(limits=1):
        probs = golden_probs()
    save_tensor(args.out, probs)
    print(f"wrote {probs.shape} {probs.dtype} to {args.out}")
    print(np.array2string(probs, precision=6))


if __name__ == "__main__":
    main()
