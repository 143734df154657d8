"""Recompute the Average and STD rows of the reference per-class table.

Shows both standard-deviation conventions so the n-1 choice can be checked
against the printed rows.
"""
from __future__ import annotations

import numpy as np

from lesionforge.metrics import column_mean_std

COLUMNS = {
    "precision": ((0.9458, 0.9495, 0.9468, 0.9421, 0.9917, 0.9126, 0.9897), "0.9540", "0.0280"),
    "recall": ((0.9984, 0.9930, 0.9564, 0.9926, 0.9204, 0.9538, 0.9091), "0.9605", "0.0361"),
    "f1": ((0.9213, 0.9633, 0.9516, 0.9957, 0.9543, 0.9327, 0.9843), "0.9576", "0.0264"),
    "auc": ((0.98, 0.98, 0.96, 0.97, 0.95, 0.98, 1.00), "0.98", "0.015"),
}

if __name__ == "__main__":
    print(f"{'column':<10} {'mean':>9} {'std n-1':>9} {'std n':>9}   printed")
    for name, (values, mean_p, std_p) in COLUMNS.items():
        mean, std = column_mean_std(values)
        print(f"{name:<10} {mean:9.6f} {std:9.6f} {np.std(values):9.6f}   {mean_p} / {std_p}")
