"""Write tests/data/confusion_fixture.csv: a 7-class prediction file with a fixed confusion diagonal.

The diagonal is (46, 84, 190, 16, 155, 887, 18). Misclassifications are spread
over the other classes with a seeded generator; every row's scores are a
probability vector whose argmax is the predicted class.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from lesionforge.report import Predictions, write_predictions

DIAGONAL = (46, 84, 190, 16, 155, 887, 18)
ERRORS = (4, 6, 12, 2, 9, 23, 2)  # off-diagonal mass per actual class; 58 in total
SEED = 5


def build(seed: int = SEED) -> Predictions:
    rng = np.random.default_rng(seed)
    k = len(DIAGONAL)
    actual, predicted = [], []
    for i, (hit, miss) in enumerate(zip(DIAGONAL, ERRORS)):
        others = [j for j in range(k) if j != i]
        wrong = rng.choice(others, size=miss)
        actual += [i] * (hit + miss)
        predicted += [i] * hit + wrong.tolist()
    actual, predicted = np.array(actual), np.array(predicted)
    order = rng.permutation(len(actual))
    actual, predicted = actual[order], predicted[order]
    scores = rng.dirichlet(np.full(k, 0.7), size=len(actual))
    rows = np.arange(len(actual))
    # move the largest mass onto the predicted class
    top = scores.argmax(axis=1)
    swap = scores[rows, predicted].copy()
    scores[rows, predicted] = scores[rows, top]
    scores[rows, top] = swap
    scores[rows, predicted] += 0.05
    scores /= scores.sum(axis=1, keepdims=True)
    ids = tuple(f"cm_{i:04d}" for i in range(len(actual)))
    return Predictions(ids, actual, predicted, scores)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "confusion_fixture.csv"))
    args = ap.parse_args()
    preds = build()
    assert (preds.scores.argmax(axis=1) == preds.predicted).all()
    path = write_predictions(args.out, preds)
    print(f"wrote {len(preds)} rows to {path}")


if __name__ == "__main__":
    main()
