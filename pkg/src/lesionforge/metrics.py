"""Confusion matrix, per-class precision/recall/F1, one-vs-rest AUC and column statistics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import CLASS_NAMES
from .errors import ContractError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are actual classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ContractError(f"confusion matrix must be square, got shape {c.shape}")
        if (c < 0).any():
            raise ContractError("confusion matrix entries must be >= 0")
        if len(self.class_names) != c.shape[0]:
            raise ContractError(f"{len(self.class_names)} class names for a {c.shape[0]}-class matrix")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def diagonal(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.diag(self.counts))


def _default_names(k: int) -> tuple[str, ...]:
    return CLASS_NAMES if k == len(CLASS_NAMES) else tuple(f"class{i}" for i in range(k))


def confusion_matrix(actual: Sequence[int], predicted: Sequence[int], k: int,
                     class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    a = np.asarray(actual)
    p = np.asarray(predicted)
    if a.shape != p.shape or a.ndim != 1:
        raise ContractError(f"actual and predicted lengths differ ({a.shape} vs {p.shape})")
    if a.size == 0:
        raise ContractError("confusion matrix needs at least one sample")
    for arr, what in ((a, "actual"), (p, "predicted")):
        if not np.issubdtype(arr.dtype, np.integer):
            raise ContractError(f"{what} labels must be integers")
        if arr.min() < 0 or arr.max() >= k:
            raise ContractError(f"{what} label out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (a, p), 1)
    return ConfusionMatrix(counts, tuple(class_names) if class_names else _default_names(k))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    undefined: frozenset = field(default_factory=frozenset)  # subset of {"precision", "recall", "f1"}


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def f1_score(precision: float, recall: float) -> tuple[float, bool]:
    s = precision + recall
    return (2 * precision * recall / s, False) if s > 0 else (0.0, True)


def per_class_prf(cm: ConfusionMatrix) -> list[PRF]:
    """One-vs-rest precision, recall and F1; zero denominators give 0 plus a flag."""
    c = cm.counts
    out = []
    for i in range(cm.k):
        tp = int(c[i, i])
        fp = int(c[:, i].sum()) - tp
        fn = int(c[i, :].sum()) - tp
        p, p_undef = _ratio(tp, tp + fp)
        r, r_undef = _ratio(tp, tp + fn)
        f, f_undef = f1_score(p, r)
        flags = {n for n, u in (("precision", p_undef), ("recall", r_undef), ("f1", f_undef)) if u}
        out.append(PRF(p, r, f, frozenset(flags)))
    return out


def accuracy_of(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("accuracy of an empty confusion matrix")
    return int(np.trace(cm.counts)) / cm.total


def column_mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    """Arithmetic mean and sample (n-1) standard deviation; std is ``None`` for one value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ContractError("column_mean_std of an empty list")
    mean = float(v.mean())
    if v.size < 2:
        return mean, None
    return mean, float(np.sqrt(((v - mean) ** 2).sum() / (v.size - 1)))


def _auc_inputs(scores, is_positive):
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise ContractError("scores and labels must be equal-length 1-D sequences")
    if not np.isfinite(s).all():
        raise ContractError("AUC scores must be finite")
    return s, pos


def auc_pair_count(scores: Sequence[float], is_positive: Sequence[bool]) -> Fraction | None:
    """Mann-Whitney form: ``(#pos>neg + 1/2 #ties) / (n_pos n_neg)``; ``None`` if one class is absent."""
    s, pos = _auc_inputs(scores, is_positive)
    sp, sn = s[pos], np.sort(s[~pos])
    if sp.size == 0 or sn.size == 0:
        return None
    below = np.searchsorted(sn, sp, side="left")
    ties = np.searchsorted(sn, sp, side="right") - below
    twice = 2 * int(below.sum()) + int(ties.sum())
    return Fraction(twice, 2 * sp.size * sn.size)


def auc_trapezoid(scores: Sequence[float], is_positive: Sequence[bool]) -> Fraction | None:
    """Trapezoidal area under the ROC curve, thresholds swept over distinct scores."""
    s, pos = _auc_inputs(scores, is_positive)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    uniq, inverse = np.unique(-s, return_inverse=True)  # descending score groups
    tp_group = np.bincount(inverse, weights=pos, minlength=uniq.size).astype(np.int64)
    fp_group = np.bincount(inverse, minlength=uniq.size) - tp_group
    tp = np.concatenate([[0], np.cumsum(tp_group)])
    fp = np.concatenate([[0], np.cumsum(fp_group)])
    twice_area = int(((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])).sum())
    return Fraction(twice_area, 2 * n_pos * n_neg)


def ovr_auc(scores: Sequence[float], is_positive: Sequence[bool]) -> float | None:
    """One-vs-rest AUC; ``None`` marks the undefined single-class case."""
    a = auc_pair_count(scores, is_positive)
    return None if a is None else float(a)


def macro_auc(aucs: Sequence[float | None]) -> float | None:
    defined = [a for a in aucs if a is not None]
    if len(defined) < len(aucs):
        warnings.warn(f"{len(aucs) - len(defined)} class(es) with undefined AUC excluded from the average",
                      stacklevel=2)
    return float(np.mean(defined)) if defined else None


def per_class_auc(probs: np.ndarray, actual: Sequence[int]) -> list[float | None]:
    probs = np.asarray(probs, dtype=np.float64)
    actual = np.asarray(actual)
    if probs.ndim != 2 or probs.shape[0] != actual.shape[0]:
        raise ContractError(f"score matrix {probs.shape} does not match {actual.shape[0]} labels")
    return [ovr_auc(probs[:, k], actual == k) for k in range(probs.shape[1])]


def is_undefined(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))
