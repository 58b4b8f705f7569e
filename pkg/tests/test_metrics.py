import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leukonet.metrics import (DegenerateClassError, auc_trapezoid, build_report, confusion_matrix,
                              evaluate_predictions, precision_recall_f1, roc_curve_ovr, roc_curves,
                              write_report)
from leukonet.optim import predicted_labels
from leukonet.tensor import Rng
from oracles import mann_whitney_auc


def test_confusion_examples():
    assert np.array_equal(confusion_matrix([0, 1, 2, 3], [0, 1, 2, 3], 4).counts, np.eye(4, dtype=int))
    cm = confusion_matrix([0, 0], [1, 1], 4).counts
    assert cm[0, 1] == 2 and cm.sum() == 2


def test_confusion_hand_tally():
    true = [0, 0, 1, 1, 2, 2, 3, 3]
    pred = [0, 1, 1, 1, 3, 2, 3, 0]
    expect = [[1, 1, 0, 0],
              [0, 2, 0, 0],
              [0, 0, 1, 1],
              [1, 0, 0, 1]]
    assert confusion_matrix(true, pred, 4).counts.tolist() == expect


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError):
        confusion_matrix([0, 4], [0, 0], 4)


def test_prf_binary_example():
    cm = confusion_matrix([0] * 6 + [1] * 4, [0] * 5 + [1] + [0] * 2 + [1] * 2, 2)
    assert cm.counts.tolist() == [[5, 1], [2, 2]]
    per, macro = precision_recall_f1(cm)
    # precision 5/7, recall 5/6 -> f1 = 10/13
    assert abs(per[0].f1 - 10 / 13) < 1e-12
    assert abs(per[0].f1 - 0.7692) < 1e-4
    assert abs(per[1].precision - 2 / 3) < 1e-12 and per[1].recall == 0.5


def test_prf_perfect_and_never_predicted():
    per, macro = precision_recall_f1(confusion_matrix([0, 1, 2, 3], [0, 1, 2, 3], 4))
    assert macro.precision == macro.recall == macro.f1 == 1.0
    per, _ = precision_recall_f1(confusion_matrix([0, 1, 1], [0, 0, 0], 2))
    assert per[1].precision == 0.0 and per[1].f1 == 0.0


def test_roc_examples():
    sep = roc_curve_ovr([1, 1, 0, 0], np.array([0.9, 0.8, 0.2, 0.1]), 1)
    assert (0.0, 1.0) in sep.points and sep.auc == 1.0
    flat = roc_curve_ovr([1, 0, 1, 0], np.full(4, 0.3), 1)
    assert flat.points == [(0.0, 0.0), (1.0, 1.0)] and flat.auc == 0.5
    hand = roc_curve_ovr([1, 1, 0, 0], np.array([0.9, 0.4, 0.6, 0.1]), 1)
    assert hand.points == [(0, 0), (0, 0.5), (0.5, 0.5), (0.5, 1), (1, 1)]
    assert hand.auc == 0.75


def test_roc_degenerate():
    with pytest.raises(DegenerateClassError):
        roc_curve_ovr([0, 0, 0], np.array([0.1, 0.2, 0.3]), 1)


def test_auc_trapezoid_examples():
    assert auc_trapezoid([(0, 0), (0, 1), (1, 1)]) == 1.0
    assert auc_trapezoid([(0, 0), (1, 1)]) == 0.5


def random_scores(seed):
    r = Rng(seed)
    n = 2 + r.below(49)
    labels = np.array([r.below(2) for _ in range(n)])
    labels[0], labels[1] = 0, 1
    levels = 1 + r.below(6)  # few levels -> heavy ties
    scores = np.array([r.below(levels) for _ in range(n)], dtype=np.float64) / levels
    return labels, scores


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_auc_equals_mann_whitney(seed):
    labels, scores = random_scores(seed)
    curve = roc_curve_ovr(labels, scores, 1)
    assert abs(curve.auc - mann_whitney_auc(scores[labels == 1], scores[labels == 0])) < 1e-9
    fpr, tpr = zip(*curve.points)
    assert all(b >= a for a, b in zip(fpr, fpr[1:])) and all(b >= a for a, b in zip(tpr, tpr[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.permutations([0, 1, 2, 3]))
def test_macro_f1_invariant_under_relabeling(seed, perm):
    r = Rng(seed)
    true = np.array([r.below(4) for _ in range(30)])
    pred = np.array([r.below(4) for _ in range(30)])
    perm = np.array(perm)
    _, a = precision_recall_f1(confusion_matrix(true, pred, 4))
    _, b = precision_recall_f1(confusion_matrix(perm[true], perm[pred], 4))
    assert abs(a.f1 - b.f1) < 1e-12


def test_accuracy_matches_argmax():
    r = Rng(3)
    probs = r.uniform(0, 1, (40, 4), np.float64)
    labels = np.array([r.below(4) for _ in range(40)])
    cm, _ = evaluate_predictions(labels, probs, ("a", "b", "c", "d"))
    assert cm.accuracy() == float((predicted_labels(probs) == labels).mean())
    assert cm.accuracy() == np.trace(cm.counts) / cm.total


NAMES = ("Benign", "Early", "Pre", "Pro")


def test_perfect_report(tmp_path):
    labels = np.array([0, 1, 2, 3] * 3)
    cm, curves = evaluate_predictions(labels, np.eye(4)[labels], NAMES)
    write_report(cm, curves, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["accuracy"] == 1.0
    assert all(summary[f"auc_{n}"] == 1.0 for n in NAMES)
    assert summary["roc_scheme"] == "one-vs-rest"
    for n in NAMES:
        assert (tmp_path / f"roc_class_{n}.csv").exists()


def test_report_is_deterministic_and_parsable(tmp_path):
    r = Rng(5)
    labels = np.array([r.below(4) for _ in range(25)])
    probs = r.uniform(0, 1, (25, 4), np.float64)
    cm, curves = evaluate_predictions(labels, probs, NAMES)
    a = build_report(cm, curves)
    b = build_report(*evaluate_predictions(labels, probs, NAMES))
    assert a == b
    rows = list(csv.reader(io.StringIO(a["confusion_matrix.csv"])))
    assert rows[0] == ["true\\predicted", *NAMES]
    assert sum(int(v) for row in rows[1:] for v in row[1:]) == 25
    rep = list(csv.reader(io.StringIO(a["classification_report.csv"])))
    assert rep[0] == ["class", "precision", "recall", "f1", "support"] and rep[-1][0] == "macro avg"
    assert all(line.count(",") == 1 for line in a["roc_class_Pre.csv"].splitlines())


def test_report_degenerate_class_has_null_auc():
    labels = np.array([0, 1, 0, 1])
    cm, curves = evaluate_predictions(labels, np.eye(4)[labels], NAMES)
    assert curves[2] is None
    files = build_report(cm, curves)
    summary = json.loads(files["summary.json"])
    assert summary["auc_Pre"] is None and summary["min_auc"] == 1.0
    assert "roc_class_Pre.csv" not in files
