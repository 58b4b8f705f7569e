"""Confusion matrix, precision/recall/F1, one-vs-rest ROC and AUC, report files."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateClassError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C], rows = true class, columns = predicted
    class_names: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class RocCurve:
    class_index: int
    points: list  # [(fpr, tpr)]
    auc: float


def confusion_matrix(true_labels, predicted_labels, classes: int, class_names=None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels but {p.size} predictions")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= classes):
            raise ValueError(f"label out of range for {classes} classes")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(classes))
    return ConfusionMatrix(counts, names)


def _ratio(num, den):
    return float(num) / float(den) if den else 0.0


def precision_recall_f1(cm: ConfusionMatrix):
    """Per-class metrics and their unweighted (macro) mean.  Zero denominators give 0."""
    counts = cm.counts
    per_class = []
    for c in range(len(counts)):
        tp = counts[c, c]
        p = _ratio(tp, counts[:, c].sum())
        r = _ratio(tp, counts[c, :].sum())
        f1 = _ratio(2 * p * r, p + r)
        per_class.append(ClassMetrics(p, r, f1, int(counts[c, :].sum())))
    macro = ClassMetrics(
        float(np.mean([m.precision for m in per_class])),
        float(np.mean([m.recall for m in per_class])),
        float(np.mean([m.f1 for m in per_class])),
        int(counts.sum()),
    )
    return per_class, macro


def roc_curve_ovr(true_labels, scores, class_index: int) -> RocCurve:
    """One-vs-rest ROC for one class.  Tied scores form a single threshold step."""
    t = np.asarray(true_labels) == class_index
    s = np.asarray(scores, dtype=np.float64)
    s = s[:, class_index] if s.ndim == 2 else s
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    pos = int(t.sum())
    neg = int(t.size - pos)
    if pos == 0 or neg == 0:
        raise DegenerateClassError(f"class {class_index} needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    t_sorted = t[order]
    tp_cum = np.cumsum(t_sorted)
    fp_cum = np.cumsum(~t_sorted)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    points = [(0.0, 0.0)]
    points += [(fp_cum[e] / neg, tp_cum[e] / pos) for e in ends]
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    points = [(float(f), float(r)) for f, r in points]
    return RocCurve(class_index, points, auc_trapezoid(points))


def auc_trapezoid(curve) -> float:
    points = curve.points if isinstance(curve, RocCurve) else curve
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


# ---------------------------------------------------------------------------
# report files


def _fmt(v) -> str:
    return f"{float(v):.6g}"


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _write(out_dir: Path, name: str, text: str):
    path = out_dir / name
    tmp = out_dir / f".{name}.tmp{os.getpid()}"
    try:
        tmp.write_text(text, encoding="utf-8", newline="")
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"{path}: {e.strerror or e}") from e
    finally:
        if tmp.exists():
            tmp.unlink()


def roc_curves(true_labels, scores, classes: int) -> dict:
    """ROC per class; classes without positives or negatives map to None."""
    curves = {}
    for c in range(classes):
        try:
            curves[c] = roc_curve_ovr(true_labels, scores, c)
        except DegenerateClassError:
            curves[c] = None
    return curves


def build_report(cm: ConfusionMatrix, curves: dict) -> dict:
    """Render all report files to strings: {filename: text}."""
    names = cm.class_names
    files = {}
    files["confusion_matrix.csv"] = _csv(
        [["true\\predicted", *names]] + [[names[i], *map(int, row)] for i, row in enumerate(cm.counts)]
    )
    per_class, macro = precision_recall_f1(cm)
    rows = [["class", "precision", "recall", "f1", "support"]]
    for name, m in zip(names, per_class):
        rows.append([name, _fmt(m.precision), _fmt(m.recall), _fmt(m.f1), m.support])
    rows.append(["macro avg", _fmt(macro.precision), _fmt(macro.recall), _fmt(macro.f1), macro.support])
    files["classification_report.csv"] = _csv(rows)
    summary = {
        "accuracy": cm.accuracy(),
        "samples": cm.total,
        "macro_precision": macro.precision,
        "macro_recall": macro.recall,
        "macro_f1": macro.f1,
        "roc_scheme": "one-vs-rest",
    }
    aucs = []
    for c, name in enumerate(names):
        curve = curves.get(c)
        summary[f"auc_{name}"] = curve.auc if curve is not None else None
        if curve is not None:
            aucs.append(curve.auc)
            files[f"roc_class_{name}.csv"] = _csv([["fpr", "tpr"]] + [[_fmt(f), _fmt(t)] for f, t in curve.points])
    summary["min_auc"] = min(aucs) if aucs else None
    summary["macro_auc"] = float(np.mean(aucs)) if aucs else None
    files["summary.json"] = json.dumps(summary, indent=2) + "\n"
    return files


def write_report(cm: ConfusionMatrix, curves: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"{out_dir}: {e.strerror or e}") from e
    files = build_report(cm, curves)
    for name, text in files.items():
        _write(out_dir, name, text)
    return [out_dir / n for n in files]


def evaluate_predictions(true_labels, probs, class_names):
    """Confusion matrix and ROC curves from probability rows."""
    probs = np.asarray(probs)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(true_labels, pred, len(class_names), class_names)
    return cm, roc_curves(true_labels, probs, len(class_names))
