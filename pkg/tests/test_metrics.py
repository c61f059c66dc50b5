"""Metrics against a brute-force pixel-counting oracle, plus report format."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfseg import metrics as X
from bfseg.metrics import ConfusionMatrix


def brute_force_counts(pred, truth, positive):
    """Per-pixel one-vs-rest counting with explicit loops."""
    tp = fp = tn = fn = 0
    for p, t in zip(np.asarray(pred).reshape(-1), np.asarray(truth).reshape(-1)):
        pp, tt = p == positive, t == positive
        if pp and tt:
            tp += 1
        elif pp and not tt:
            fp += 1
        elif not pp and tt:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def brute_force_metrics(tp, fp, tn, fn):
    def ratio(a, b):
        return 1.0 if b == 0 else a / b

    return {
        "f1": ratio(2 * tp, 2 * tp + fp + fn),
        "se": ratio(tp, tp + fn),
        "sp": ratio(tn, tn + fp),
        "ac": ratio(tp + tn, tp + fp + tn + fn),
        "js": ratio(tp, tp + fp + fn),
    }


class TestConfusion:
    def test_perfect_prediction(self):
        m = np.array([[0, 1], [2, 1]])
        cm = X.confusion(m, m, positive_class=1)
        assert cm.fp == 0 and cm.fn == 0
        assert cm.tp == 2 and cm.tn == 2

    def test_explicit_counts(self):
        # 8 pixels arranged for TP=2, FP=1, TN=4, FN=1
        truth = np.array([1, 1, 1, 0, 0, 0, 0, 0])
        pred = np.array([1, 1, 0, 1, 0, 0, 0, 0])
        cm = X.confusion(pred, truth, positive_class=1)
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (2, 1, 4, 1)
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == brute_force_counts(pred, truth, 1)[:1] + brute_force_counts(pred, truth, 1)[1:]

    def test_absent_positive_class(self):
        m = np.zeros((3, 3), dtype=int)
        cm = X.confusion(m, m, positive_class=2)
        assert (cm.tp, cm.fp, cm.fn) == (0, 0, 0)
        assert cm.tn == 9

    def test_shape_mismatch(self):
        with pytest.raises(Exception):
            X.confusion(np.zeros((2, 2)), np.zeros((3, 3)), 1)

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            X.confusion(np.array([-1, 0]), np.array([0, 0]), 1)


class TestFiveMetrics:
    def test_worked_example(self):
        cm = ConfusionMatrix(tp=2, fp=1, tn=4, fn=1)
        assert X.accuracy(cm) == pytest.approx(0.75)
        assert X.sensitivity(cm) == pytest.approx(2 / 3)
        assert X.specificity(cm) == pytest.approx(0.8)
        assert X.f1(cm) == pytest.approx(2 / 3)
        assert X.jaccard(cm) == pytest.approx(0.5)

    def test_perfect_is_all_ones(self):
        cm = ConfusionMatrix(tp=5, fp=0, tn=11, fn=0)
        assert all(v == 1.0 for v in X.all_metrics(cm).values())

    def test_f1_jaccard_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            tp, fp, tn, fn = (int(v) for v in rng.integers(0, 30, size=4))
            cm = ConfusionMatrix(tp, fp, tn, fn)
            if tp + fp + fn == 0:
                continue
            js = X.jaccard(cm)
            assert abs(X.f1(cm) - 2 * js / (1 + js)) < 1e-12

    def test_degenerate_flags(self):
        cm = ConfusionMatrix(tp=0, fp=0, tn=4, fn=0)
        assert cm.degenerate() == {"f1", "se", "js"}
        assert X.f1(cm) == 1.0 and X.sensitivity(cm) == 1.0 and X.jaccard(cm) == 1.0

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    @settings(max_examples=200, deadline=None)
    def test_all_metrics_in_unit_interval(self, tp, fp, tn, fn):
        for v in X.all_metrics(ConfusionMatrix(tp, fp, tn, fn)).values():
            assert 0.0 <= v <= 1.0

    def test_matches_oracle_on_random_masks(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred = rng.integers(0, 3, size=(4, 4))
            truth = rng.integers(0, 3, size=(4, 4))
            cm = X.confusion(pred, truth, positive_class=2)
            assert X.all_metrics(cm) == brute_force_metrics(*brute_force_counts(pred, truth, 2))

    def test_invariant_under_nonpositive_relabeling(self):
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 3, size=(6, 6))
        truth = rng.integers(0, 3, size=(6, 6))
        base = X.all_metrics(X.confusion(pred, truth, positive_class=2))
        swap = {0: 1, 1: 0, 2: 2}
        pred2 = np.vectorize(swap.get)(pred)
        truth2 = np.vectorize(swap.get)(truth)
        assert X.all_metrics(X.confusion(pred2, truth2, positive_class=2)) == base


class TestEvaluateDataset:
    def test_single_image_pooled_equals_per_image(self):
        rng = np.random.default_rng(3)
        pred = rng.integers(0, 3, size=(5, 5))
        truth = rng.integers(0, 3, size=(5, 5))
        out = X.evaluate_dataset([pred], [truth], positive_class=2)
        assert out.pooled == out.per_image_mean
        assert out.n_images == 1

    def test_pooling_sums_counts(self):
        # image A: tp=2 fp=1 tn=4 fn=1; image B: tp=1 fp=0 tn=6 fn=1
        a_truth = np.array([1, 1, 1, 0, 0, 0, 0, 0])
        a_pred = np.array([1, 1, 0, 1, 0, 0, 0, 0])
        b_truth = np.array([1, 1, 0, 0, 0, 0, 0, 0])
        b_pred = np.array([1, 0, 0, 0, 0, 0, 0, 0])
        out = X.evaluate_dataset([a_pred, b_pred], [a_truth, b_truth], positive_class=1)
        summed = ConfusionMatrix(tp=3, fp=1, tn=10, fn=2)
        assert out.pooled == X.all_metrics(summed)
        hand_mean = {
            k: (v1 + v2) / 2
            for (k, v1), (_, v2) in zip(
                X.all_metrics(ConfusionMatrix(2, 1, 4, 1)).items(),
                X.all_metrics(ConfusionMatrix(1, 0, 6, 1)).items(),
            )
        }
        for k in X.METRIC_ORDER:
            assert out.per_image_mean[k] == pytest.approx(hand_mean[k])

    def test_empty_set_is_an_error(self):
        with pytest.raises(ValueError):
            X.evaluate_dataset([], [], positive_class=1)

    def test_length_mismatch(self):
        with pytest.raises(Exception):
            X.evaluate_dataset([np.zeros((2, 2))], [], positive_class=1)


class TestReport:
    PROPOSED = {"f1": 0.951, "se": 0.942, "sp": 0.989, "ac": 0.986, "js": 0.981}
    UNET = {"f1": 0.869, "se": 0.910, "sp": 0.907, "ac": 0.912, "js": 0.899}

    def test_published_style_rows_render_exactly(self):
        text = X.format_report(
            [("Proposed Method", self.PROPOSED), ("U-Net", self.UNET)]
        )
        lines = text.splitlines()
        assert lines[0].split() == ["Method", "F1", "SE", "SP", "AC", "JS"]
        assert lines[2].split() == ["Proposed", "Method", "0.951", "0.942", "0.989", "0.986", "0.981"]
        assert lines[3].split() == ["U-Net", "0.869", "0.910", "0.907", "0.912", "0.899"]

    def test_all_ones_row(self):
        row = {k: 1.0 for k in X.METRIC_ORDER}
        text = X.format_report([("perfect", row)])
        assert text.splitlines()[2].split()[1:] == ["1.000"] * 5

    def test_missing_metric_is_an_error(self):
        with pytest.raises(ValueError, match="js"):
            X.format_report([("partial", {"f1": 1.0, "se": 1.0, "sp": 1.0, "ac": 1.0})])

    def test_csv_header_and_order(self):
        csv = X.report_csv([("run", self.PROPOSED)])
        lines = csv.strip().splitlines()
        assert lines[0] == "name,f1,se,sp,ac,js"
        assert lines[1] == "run,0.951,0.942,0.989,0.986,0.981"

    def test_degenerate_values_are_marked(self):
        row = {k: 1.0 for k in X.METRIC_ORDER}
        text = X.format_report([("empty", row)], flags={"empty": {"f1", "js"}})
        assert "1.000*" in text
        assert "degenerate denominator" in text
