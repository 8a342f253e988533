import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volscan.errors import MetricError
from volscan.metrics import (RocCurve, auc, auc_oracle, confusion_metrics, evaluate_scores, rates, report_csv,
                             roc_csv, roc_curve, youden_point)


def test_auc_examples():
    assert auc([0.1, 0.9], [0, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 1, 1, 0]) == 0.5


def test_oracle_examples():
    assert auc_oracle([0.5, 0.5], [0, 1]) == 0.5
    assert auc_oracle([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0]])
def test_single_class_rejected(labels):
    with pytest.raises(MetricError):
        auc(np.linspace(0, 1, len(labels)), labels)
    with pytest.raises(MetricError):
        auc_oracle(np.linspace(0, 1, len(labels)), labels)


def random_instance(rng):
    m = int(rng.integers(2, 201))
    levels = int(rng.integers(1, 8)) if rng.random() < 0.5 else None
    s = rng.integers(0, levels, m) / levels if levels else rng.random(m)
    y = rng.integers(0, 2, m)
    y[0], y[1] = 0, 1
    return s, y


def test_auc_matches_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        s, y = random_instance(rng)
        assert abs(auc(s, y) - auc_oracle(s, y)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_invariances(seed):
    s, y = random_instance(np.random.default_rng(seed))
    a = auc(s, y)
    assert abs(auc(s**3, y) - a) <= 1e-12
    assert abs(auc(1 / (1 + np.exp(-s)), y) - a) <= 1e-12
    assert abs(a + auc(-s, y) - 1) <= 1e-12


def test_roc_monotone_with_endpoints():
    rng = np.random.default_rng(1)
    s, y = rng.random(50), rng.integers(0, 2, 50)
    roc = roc_curve(s, y)
    assert roc.tpr[0] == roc.fpr[0] == 0 and roc.tpr[-1] == roc.fpr[-1] == 1
    assert np.all(np.diff(roc.tpr) >= 0) and np.all(np.diff(roc.fpr) >= 0)
    assert np.all(np.diff(roc.thresholds) < 0)


def test_youden_tie_goes_to_higher_threshold():
    roc = RocCurve(np.array([np.inf, 0.9, 0.6, 0.3, 0.1]), np.array([0, 0.6, 0.8, 0.95, 1.0]),
                   np.array([0, 0.1, 0.3, 0.7, 1.0]), 20, 10)
    op = youden_point(roc)
    assert (op.sensitivity, 1 - op.specificity) == (0.6, pytest.approx(0.1))
    assert op.threshold == 0.9 and op.youden == pytest.approx(0.5)


def test_youden_perfect_and_constant():
    s, y = [0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1]
    op = youden_point(roc_curve(s, y), s, y)
    assert op.youden == 1 and op.threshold == 0.7 and op.f1 == 1
    assert youden_point(roc_curve([0.4] * 4, y)).youden == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_youden_is_exhaustive_maximum(seed):
    s, y = random_instance(np.random.default_rng(seed))
    op = youden_point(roc_curve(s, y), s, y)
    best = max(m["sensitivity"] + m["specificity"] - 1
               for m in (confusion_metrics(s, y, t) for t in np.r_[np.unique(s), np.inf]))
    assert abs(op.youden - best) <= 1e-12
    m = confusion_metrics(s, y, op.threshold)
    assert abs(m["sensitivity"] + m["specificity"] - 1 - op.youden) <= 1e-12


def test_confusion_arithmetic():
    r = rates(tp=8, fp=2, fn=4, tn=6)
    assert r["sensitivity"] == pytest.approx(0.6667, abs=1e-4)
    assert r["specificity"] == 0.75 and r["precision"] == 0.8
    assert r["f1"] == pytest.approx(0.7273, abs=1e-4)


def test_threshold_above_all_scores():
    m = confusion_metrics([0.1, 0.5, 0.9], [0, 1, 1], 2.0)
    assert m["sensitivity"] == 0 and m["specificity"] == 1 and m["f1"] == 0


def test_report_schema():
    r = evaluate_scores("Conv-LSTM", [0.1, 0.8, 0.7, 0.2], [0, 1, 1, 0], 0.5)
    text = report_csv([r])
    assert text.splitlines()[0] == "model,auc,threshold,sensitivity,specificity,f1,n_pos,n_neg"
    assert text.splitlines()[1] == "Conv-LSTM,1.0,0.5,1.0,1.0,1.0,2,2"
    assert roc_csv(roc_curve([0.1, 0.9], [0, 1])).splitlines()[0] == "fpr,tpr,threshold"
