import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nightatlas import evalkit as ev

CLASSES = ["Berlin", "Madrid", "Other", "Paris"]
REPORTED_MATRIX = np.array([[3, 0, 9, 0], [0, 7, 24, 0], [0, 0, 3063, 0], [0, 0, 5, 8]])


def _pairs_from_matrix(m):
    return [(CLASSES[i], CLASSES[j]) for i in range(4) for j in range(4) for _ in range(m[i, j])]


def test_reported_matrix_metrics():
    cm = ev.confusion_matrix(_pairs_from_matrix(REPORTED_MATRIX), CLASSES)
    assert np.array_equal(cm.counts, REPORTED_MATRIX)
    assert list(cm.support) == [12, 31, 3063, 13]
    m = ev.precision_recall(cm)
    assert list(m.precision[[0, 1, 3]]) == [1.0, 1.0, 1.0]
    assert m.recall == pytest.approx([0.25, 0.225806, 1.0, 0.615385], abs=1e-6)
    assert m.precision[2] == pytest.approx(3063 / 3101, abs=1e-12)
    assert cm.accuracy == pytest.approx((3 + 7 + 3063 + 8) / 3119)


def test_zero_denominators_are_zero():
    cm = ev.confusion_matrix([("a", "a")], ["a", "b"])
    m = ev.precision_recall(cm)
    assert list(m.precision) == [1.0, 0.0] and list(m.recall) == [1.0, 0.0]


def test_unknown_labels_and_abstain():
    with pytest.raises(ev.UnknownLabelError):
        ev.confusion_matrix([("x", "a")], ["a"])
    with pytest.raises(ev.UnknownLabelError):
        ev.confusion_matrix([("a", ev.ABSTAIN)], ["a"])
    cm = ev.confusion_matrix([("a", ev.ABSTAIN), ("a", "a"), ("b", "a")], ["a", "b"], allow_abstain=True)
    assert list(cm.abstain) == [1, 0] and list(cm.support) == [2, 1] and cm.total == 3
    m = ev.precision_recall(cm)
    assert m.recall[0] == 0.5 and m.precision[0] == 0.5


@given(st.lists(st.tuples(st.sampled_from(CLASSES), st.sampled_from(CLASSES)), max_size=60), st.randoms())
def test_confusion_is_order_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = ev.confusion_matrix(pairs, CLASSES)
    b = ev.confusion_matrix(shuffled, CLASSES)
    assert np.array_equal(a.counts, b.counts)
    assert a.counts.sum() == len(pairs)


def test_argmax_ties_go_to_lowest_index():
    probs = np.array([[0.25, 0.25, 0.25, 0.25], [0.1, 0.4, 0.1, 0.4], [0.0, 0.0, 0.5, 0.5]])
    assert list(ev.argmax_lowest(probs)) == [0, 1, 2]


def test_top_predictions_order_and_limit():
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.95, 0.05], [0.6, 0.4], [0.2, 0.8]])
    top = ev.top_predictions(["a", "b", "c", "d", "e"], probs, ["X", "Y"], k=3)
    assert [i for i, _ in top["X"]] == ["c", "a", "b"]
    assert top["Y"] == [("e", 0.8)]


def test_metrics_csv_round_trip(tmp_path):
    reports = [ev.report_from_predictions(*zip(*_pairs_from_matrix(REPORTED_MATRIX)), CLASSES, "epoch", e) for e in (1, 2)]
    path = tmp_path / "metrics.csv"
    ev.write_metrics_csv(reports, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epoch", "class", "precision", "recall", "support"]
    assert len(rows) == 9
    back = ev.read_metrics_csv(path)
    for tag in ("1", "2"):
        m = back[tag]
        assert m.classes == CLASSES
        assert np.array_equal(m.precision, reports[0].metrics.precision)
        assert np.array_equal(m.recall, reports[0].metrics.recall)
        assert list(m.support) == [12, 31, 3063, 13]


def test_threshold_reports_use_threshold_header(tmp_path):
    r = ev.report_from_predictions(["a", "b"], ["a", ev.ABSTAIN], ["a", "b"], "threshold", 0.35, allow_abstain=True)
    ev.write_metrics_csv([r], tmp_path / "m.csv")
    ev.write_confusion_csv(r.confusion, tmp_path / "c.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "threshold,class,precision,recall,support"
    assert (tmp_path / "c.csv").read_text().splitlines() == ["true,pred_a,pred_b,abstain", "a,1,0,0", "b,0,0,1"]


def test_export_reports_layout(tmp_path):
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=20)
    ids = [f"item{i}" for i in range(20)]
    truth = [CLASSES[i % 4] for i in range(20)]
    reports = [ev.evaluate_probabilities(ids, truth, probs, CLASSES, e, top_k=3) for e in (1, 2)]
    ev.export_reports(reports, tmp_path, image_lookup=lambda i: np.full((8, 8), 0.5), city_classes=["Berlin", "Madrid", "Paris"])
    assert (tmp_path / "metrics.csv").exists()
    summary = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert len(summary) == 2
    m = reports[0].metrics
    assert float(summary[0]["city_mean_precision"]) == pytest.approx(np.mean(m.precision[[0, 1, 3]]))
    assert float(summary[0]["mean_recall"]) == pytest.approx(m.mean_recall)
    sub = tmp_path / "epoch_1"
    top = json.loads((sub / "top_predictions.json").read_text())
    assert set(top) == set(CLASSES) and all(len(v) <= 3 for v in top.values())
    assert {p.name for p in sub.glob("top_*.png")} == {f"top_{c}.png" for c, v in top.items() if v}


def test_ema_smoothing():
    assert ev.smooth_ema([1.0, 0.0, 0.0]) == pytest.approx([1.0, 0.6, 0.36])
    assert ev.smooth_ema([]) == []
