"""Class reports (text + CSV), prediction files, training-curve SVGs and the prediction gallery."""
from __future__ import annotations

import base64
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from . import CLASS_NAMES
from .data import Dataset
from .errors import ContractError, DataIOError, SchemaError
from .metrics import (ConfusionMatrix, accuracy_of, column_mean_std, confusion_matrix, per_class_auc,
                      per_class_prf)

UNDEF = "undef"
COLUMNS = ("precision", "recall", "f1", "auc")


@dataclass(frozen=True)
class ClassRow:
    label: str
    precision: float
    recall: float
    f1: float
    auc: float | None
    flags: tuple[str, ...] = ()

    def value(self, col: str):
        return getattr(self, col)


@dataclass(frozen=True)
class ClassReport:
    rows: tuple[ClassRow, ...]
    average: dict
    std: dict
    accuracy: float | None
    diagonal: tuple[int, ...] | None = None
    title: str = ""

    def column(self, col: str) -> list:
        return [r.value(col) for r in self.rows]

    def undefined_notes(self) -> list[str]:
        return [f"{r.label}: {', '.join(r.flags)}" for r in self.rows if r.flags]


def _summarize(rows: Sequence[ClassRow]) -> tuple[dict, dict]:
    average, std = {}, {}
    for col in COLUMNS:
        vals = [r.value(col) for r in rows if r.value(col) is not None]
        if vals:
            average[col], std[col] = column_mean_std(vals)
        else:
            average[col], std[col] = None, None
    return average, std


def report_from_rows(rows: Sequence[ClassRow], accuracy: float | None = None,
                     diagonal: Sequence[int] | None = None, title: str = "") -> ClassReport:
    """Average (macro mean) and STD (n-1) rows computed from the per-class rows."""
    if not rows:
        raise ContractError("a report needs at least one class row")
    average, std = _summarize(rows)
    return ClassReport(tuple(rows), average, std, accuracy,
                       tuple(int(d) for d in diagonal) if diagonal is not None else None, title)


def render_report(cm: ConfusionMatrix, prf=None, aucs: Sequence[float | None] | None = None,
                  title: str = "") -> ClassReport:
    """Assemble a :class:`ClassReport` from a confusion matrix plus optional per-class AUCs."""
    prf = prf if prf is not None else per_class_prf(cm)
    aucs = list(aucs) if aucs is not None else [None] * cm.k
    if len(prf) != cm.k or len(aucs) != cm.k:
        raise ContractError(f"{cm.k} classes but {len(prf)} metric rows and {len(aucs)} AUCs")
    rows = []
    for name, m, a in zip(cm.class_names, prf, aucs):
        flags = tuple(sorted(m.undefined)) + (("auc",) if a is None else ())
        rows.append(ClassRow(name, m.precision, m.recall, m.f1, a, flags))
    acc = accuracy_of(cm) if cm.total else None
    return report_from_rows(rows, acc, cm.diagonal(), title)


# ----------------------------------------------------------------- text / CSV

def _cell(x, digits: int = 4) -> str:
    return UNDEF if x is None else f"{x:.{digits}f}"


def format_text(report: ClassReport) -> str:
    """Fixed-width table: one row per class, then Average and STD, at 4 decimals."""
    lines = []
    if report.title:
        lines.append(report.title)
    lines.append("Accuracy: " + (UNDEF if report.accuracy is None else f"{100 * report.accuracy:.2f}%"))
    lines.append(f"{'Class Label':<12}{'Precision':>10}{'Recall':>10}{'F1 Score':>10}{'AUC':>10}")
    for r in report.rows:
        lines.append(f"{r.label:<12}" + "".join(f"{_cell(r.value(c)):>10}" for c in COLUMNS))
    for label, stats in (("Average", report.average), ("STD", report.std)):
        lines.append(f"{label:<12}" + "".join(f"{_cell(stats[c]):>10}" for c in COLUMNS))
    if report.diagonal is not None:
        lines.append("Confusion diagonal: (" + ", ".join(str(d) for d in report.diagonal) + ")")
    notes = report.undefined_notes()
    if notes:
        lines.append("Undefined (reported as 0 or excluded): " + "; ".join(notes))
    return "\n".join(lines) + "\n"


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _unnum(s: str):
    return None if s == "" else float(s)


def format_csv(report: ClassReport) -> str:
    """Full-precision CSV; ``#`` header lines carry title, accuracy and diagonal."""
    buf = io.StringIO()
    buf.write(f"# title={report.title}\n")
    buf.write(f"# accuracy={_num(report.accuracy)}\n")
    diag = "" if report.diagonal is None else " ".join(str(d) for d in report.diagonal)
    buf.write(f"# diagonal={diag}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", *COLUMNS, "flags"])
    for r in report.rows:
        w.writerow([r.label, *(_num(r.value(c)) for c in COLUMNS), " ".join(r.flags)])
    for label, stats in (("Average", report.average), ("STD", report.std)):
        w.writerow([label, *(_num(stats[c]) for c in COLUMNS), ""])
    return buf.getvalue()


def parse_csv(text: str) -> ClassReport:
    lines = text.splitlines()
    meta = {}
    while lines and lines[0].startswith("# "):
        key, _, value = lines.pop(0)[2:].partition("=")
        meta[key] = value
    if set(meta) != {"title", "accuracy", "diagonal"}:
        raise SchemaError(f"report CSV header lines incomplete: {sorted(meta)}")
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != ["row", *COLUMNS, "flags"]:
        raise SchemaError(f"unexpected report CSV header {header}")
    rows, summary = [], {}
    for rec in reader:
        if len(rec) != len(header):
            raise SchemaError(f"malformed report CSV row {rec}")
        label, values, flags = rec[0], [_unnum(v) for v in rec[1:5]], rec[5]
        if label in ("Average", "STD"):
            summary[label] = dict(zip(COLUMNS, values))
        else:
            rows.append(ClassRow(label, *values, tuple(flags.split()) if flags else ()))
    if set(summary) != {"Average", "STD"}:
        raise SchemaError("report CSV lacks Average/STD rows")
    diag = tuple(int(d) for d in meta["diagonal"].split()) if meta["diagonal"] else None
    return ClassReport(tuple(rows), summary["Average"], summary["STD"], _unnum(meta["accuracy"]), diag,
                       meta["title"])


def write_report(report: ClassReport, out_stem: str | Path) -> tuple[Path, Path]:
    stem = Path(out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt, csv_path = stem.with_suffix(".txt"), stem.with_suffix(".csv")
    txt.write_text(format_text(report), encoding="utf-8")
    csv_path.write_text(format_csv(report), encoding="utf-8")
    return txt, csv_path


def comparison_table(reports: Sequence[ClassReport], names: Sequence[str]) -> str:
    """Side-by-side accuracy and macro averages, one line per report."""
    lines = [f"{'phase':<24}{'accuracy':>10}" + "".join(f"{c:>11}" for c in COLUMNS)]
    for name, r in zip(names, reports):
        acc = UNDEF if r.accuracy is None else f"{r.accuracy:.4f}"
        lines.append(f"{name:<24}{acc:>10}" + "".join(f"{_cell(r.average[c]):>11}" for c in COLUMNS))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- prediction files

@dataclass(frozen=True)
class Predictions:
    ids: tuple[str, ...]
    actual: np.ndarray
    predicted: np.ndarray
    scores: np.ndarray  # [N, K] softmax probabilities

    def __len__(self) -> int:
        return len(self.ids)


def write_predictions(path: str | Path, preds: Predictions) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = preds.scores.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "actual", "predicted", *(f"score_{i}" for i in range(k))])
        for i, sid in enumerate(preds.ids):
            w.writerow([sid, int(preds.actual[i]), int(preds.predicted[i]),
                        *(repr(float(s)) for s in preds.scores[i])])
    return path


def read_predictions(path: str | Path) -> Predictions:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read prediction file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["id", "actual", "predicted"]:
            raise SchemaError(f"{path}: header must start with id,actual,predicted")
        k = len(header) - 3
        if header[3:] != [f"score_{i}" for i in range(k)] or k < 1:
            raise SchemaError(f"{path}: score columns must be score_0..score_{{K-1}}")
        ids, actual, predicted, scores = [], [], [], []
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise SchemaError(f"{path}:{line_no}: expected {len(header)} fields, got {len(rec)}")
            try:
                ids.append(rec[0])
                actual.append(int(rec[1]))
                predicted.append(int(rec[2]))
                scores.append([float(s) for s in rec[3:]])
            except ValueError as exc:
                raise SchemaError(f"{path}:{line_no}: {exc}") from exc
    if not ids:
        raise SchemaError(f"{path}: no prediction rows")
    return Predictions(tuple(ids), np.array(actual), np.array(predicted), np.array(scores, dtype=np.float64))


def report_from_predictions(preds: Predictions, class_names: Sequence[str] | None = None,
                            title: str = "") -> ClassReport:
    k = preds.scores.shape[1]
    names = tuple(class_names) if class_names else (CLASS_NAMES if k == len(CLASS_NAMES) else None)
    cm = confusion_matrix(preds.actual, preds.predicted, k, names)
    return render_report(cm, aucs=per_class_auc(preds.scores, preds.actual), title=title)


# ----------------------------------------------------------------- curves

PANEL_W, PANEL_H, MARGIN = 440, 300, 48
SERIES_COLORS = {"train": "#1f77b4", "val": "#d62728"}


def _padded_range(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    span = hi - lo
    if span < 1e-12:
        pad = 0.5 * abs(hi) if hi else 0.5
        return lo - pad, hi + pad
    return lo - 0.05 * span, hi + 0.05 * span


def _panel(x0: float, title: str, epochs: list[int], series: dict[str, list[float]]) -> list[str]:
    out = [f'<g transform="translate({x0:.0f},0)">',
           f'<text x="{PANEL_W / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{MARGIN}" y="{MARGIN}" width="{PANEL_W - 2 * MARGIN}" height="{PANEL_H - 2 * MARGIN}" '
           'fill="none" stroke="#444"/>']
    finite = {k: v for k, v in series.items() if any(math.isfinite(y) for y in v)}
    if not finite:
        out.append(f'<text x="{PANEL_W / 2:.0f}" y="{PANEL_H / 2:.0f}" text-anchor="middle">no data</text></g>')
        return out
    xs_lo, xs_hi = _padded_range(epochs)
    ys_lo, ys_hi = _padded_range([y for v in finite.values() for y in v if math.isfinite(y)])
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN

    def px(e):
        return MARGIN + (e - xs_lo) / (xs_hi - xs_lo) * w

    def py(y):
        return MARGIN + h - (y - ys_lo) / (ys_hi - ys_lo) * h

    for frac in (0.0, 0.5, 1.0):
        yv = ys_lo + frac * (ys_hi - ys_lo)
        out.append(f'<text x="{MARGIN - 4}" y="{py(yv) + 4:.2f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    out.append(f'<text x="{MARGIN}" y="{PANEL_H - MARGIN + 14}" font-size="10">{epochs[0]}</text>')
    out.append(f'<text x="{PANEL_W - MARGIN}" y="{PANEL_H - MARGIN + 14}" text-anchor="end" '
               f'font-size="10">{epochs[-1]}</text>')
    out.append(f'<text x="{PANEL_W / 2:.0f}" y="{PANEL_H - 12}" text-anchor="middle" font-size="11">epoch</text>')
    for i, (name, ys) in enumerate(finite.items()):
        color = SERIES_COLORS.get(name, "#333")
        pts = [(px(e), py(y)) for e, y in zip(epochs, ys) if math.isfinite(y)]
        if len(pts) > 1:
            coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline class="series-{name}" fill="none" stroke="{color}" stroke-width="1.5" '
                       f'points="{coords}"/>')
        out += [f'<circle class="marker-{name}" cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}"/>' for x, y in pts]
        out.append(f'<text x="{PANEL_W - MARGIN - 4}" y="{MARGIN + 14 + 14 * i}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{name}</text>')
    out.append("</g>")
    return out


def curves_svg(logs) -> str:
    if not logs:
        raise ContractError("emit_curves needs at least one log row")
    epochs = [r.epoch for r in logs]
    acc = {"train": [r.train_acc for r in logs], "val": [r.val_acc for r in logs]}
    loss = {"train": [r.train_loss for r in logs], "val": [r.val_loss for r in logs]}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * PANEL_W}" height="{PANEL_H}" '
             f'viewBox="0 0 {2 * PANEL_W} {PANEL_H}" font-family="sans-serif">',
             '<rect width="100%" height="100%" fill="white"/>']
    parts += _panel(0, "Accuracy", epochs, acc)
    parts += _panel(PANEL_W, "Loss", epochs, loss)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_curves(logs, out_stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (exact log values) and ``<stem>.svg`` (accuracy and loss panels)."""
    from .trainer import write_epoch_logs

    stem = Path(out_stem)
    svg = curves_svg(logs)
    csv_path = write_epoch_logs(stem.with_suffix(".csv"), logs)
    svg_path = stem.with_suffix(".svg")
    svg_path.write_text(svg, encoding="utf-8")
    return csv_path, svg_path


# ----------------------------------------------------------------- gallery

CELL = 128
CAPTION_H = 22


def _display_image(image: np.ndarray, dataset: Dataset) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if dataset.norm_stats is not None:
        mean = np.asarray(dataset.norm_stats.mean).reshape(-1, 1, 1)
        std = np.asarray(dataset.norm_stats.std).reshape(-1, 1, 1)
        img = img * std + mean
    img = np.clip(img, 0.0, 1.0)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return (np.round(img.transpose(1, 2, 0) * 255)).astype(np.uint8)


def _png_data_uri(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG", optimize=False)
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def gallery_selection(n_total: int, n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n_total)[:n]


def prediction_gallery(test: Dataset, predictions: Sequence[int], n: int, out_path: str | Path,
                       seed: int = 0, columns: int = 4) -> tuple[Path, int]:
    """SVG grid of ``n`` seeded-shuffled test images captioned ``Actual i || Predicted j``.

    Misclassified cells get a red frame and caption. Returns the path and the red-flag count.
    """
    preds = np.asarray(predictions)
    if preds.shape != (len(test),):
        raise ContractError(f"{preds.size} predictions for {len(test)} test samples")
    if not 1 <= n <= len(test):
        raise ContractError(f"gallery size must be in [1, {len(test)}], got {n}")
    chosen = gallery_selection(len(test), n, seed)
    rows = math.ceil(n / columns)
    width, height = columns * CELL, rows * (CELL + CAPTION_H) + 2 * CAPTION_H
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
           '<rect width="100%" height="100%" fill="white"/>']
    flags = 0
    for slot, idx in enumerate(chosen):
        sample = test.samples[idx]
        actual, predicted = int(sample.label), int(preds[idx])
        wrong = actual != predicted
        flags += wrong
        x, y = (slot % columns) * CELL, (slot // columns) * (CELL + CAPTION_H)
        color = "red" if wrong else "black"
        cls = "misclassified" if wrong else "correct"
        out.append(f'<g class="{cls}" data-id="{escape(sample.id)}">')
        out.append(f'<image x="{x + 4}" y="{y + 4}" width="{CELL - 8}" height="{CELL - 8}" '
                   f'style="image-rendering:pixelated" href="{_png_data_uri(_display_image(sample.image, test))}"/>')
        if wrong:
            out.append(f'<rect x="{x + 2}" y="{y + 2}" width="{CELL - 4}" height="{CELL - 4}" fill="none" '
                       'stroke="red" stroke-width="3"/>')
        out.append(f'<text x="{x + CELL / 2:.0f}" y="{y + CELL + 14}" text-anchor="middle" font-size="12" '
                   f'fill="{color}">Actual {actual} || Predicted {predicted}</text>')
        out.append("</g>")
    legend = ", ".join(f"{i}={name}" for i, name in enumerate(test.class_names))
    out.append(f'<text x="4" y="{height - CAPTION_H / 2:.0f}" font-size="11">{escape(legend)}</text>')
    out.append("</svg>")
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path, flags
