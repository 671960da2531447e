import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from urbanseg.errors import ValidationError
from urbanseg.metrics import (
    ConfusionMatrix,
    accumulate,
    compute_report,
    confusion_matrix,
    f1_from_iou,
)

from reference_results import RESULTS

matrices = st.integers(1, 6).flatmap(
    lambda k: arrays(np.int64, (k, k), elements=st.integers(0, 1000)).filter(lambda a: a.sum() > 0)
)


def test_two_class_example():
    cm = ConfusionMatrix(np.array([[4, 1], [1, 4]]))
    r = compute_report(cm)
    assert r.iou[0] == pytest.approx(4 / 6)
    assert r.accuracy[0] == pytest.approx(0.8)
    assert r.f1[0] == pytest.approx(0.8)
    assert r.overall_accuracy == pytest.approx(0.8)


def test_f1_of_reference_background_iou():
    assert f1_from_iou(0.90) == pytest.approx(0.947, abs=5e-4)
    assert round(f1_from_iou(RESULTS[("Chengdu", 1)][0][1]), 2) == RESULTS[("Chengdu", 1)][0][2]


def test_perfect_predictions_give_diagonal_and_ones():
    labels = np.array([0, 1, 2, 2, 1, 0, 3])
    cm = confusion_matrix(labels, labels, 5)
    assert np.array_equal(cm.counts, np.diag(np.bincount(labels, minlength=5)))
    r = compute_report(cm)
    for values in (r.iou, r.f1, r.accuracy, r.precision, r.recall):
        assert all(v == 1.0 for v in values if v is not None)
    assert r.iou[4] is None and r.f1[4] is None and r.accuracy[4] is None
    assert r.mean_iou == 1.0


@given(matrices)
@settings(max_examples=200, deadline=None)
def test_f1_iou_identity(counts):
    r = compute_report(ConfusionMatrix(counts))
    for iou, f1 in zip(r.iou, r.f1):
        assert (iou is None) == (f1 is None)
        if iou is not None:
            assert abs(f1 - 2 * iou / (1 + iou)) <= 1e-12


@given(matrices)
@settings(max_examples=200, deadline=None)
def test_metric_ranges(counts):
    r = compute_report(ConfusionMatrix(counts))
    for values in (r.iou, r.f1, r.accuracy, r.precision, r.recall):
        assert all(0.0 <= v <= 1.0 for v in values if v is not None)
    assert 0.0 <= r.overall_accuracy <= 1.0


@given(matrices, st.randoms())
@settings(max_examples=100, deadline=None)
def test_permutation_equivariance(counts, rnd):
    k = counts.shape[0]
    perm = list(range(k))
    rnd.shuffle(perm)
    perm = np.array(perm)
    a = compute_report(ConfusionMatrix(counts))
    b = compute_report(ConfusionMatrix(counts[np.ix_(perm, perm)]))
    for name in ("iou", "f1", "accuracy", "precision", "recall"):
        assert [getattr(a, name)[p] for p in perm] == getattr(b, name)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
@settings(max_examples=100, deadline=None)
def test_accumulation_is_batch_invariant(seed, k):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, k, size=200)
    p = rng.integers(0, k, size=200)
    cut = int(rng.integers(0, 201))
    whole = confusion_matrix(t, p, k)
    ab = accumulate(accumulate(ConfusionMatrix.empty(k), t[:cut], p[:cut]), t[cut:], p[cut:])
    ba = accumulate(accumulate(ConfusionMatrix.empty(k), t[cut:], p[cut:]), t[:cut], p[:cut])
    merged = confusion_matrix(t[:cut], p[:cut], k).merge(confusion_matrix(t[cut:], p[cut:], k))
    for cm in (ab, ba, merged):
        assert np.array_equal(cm.counts, whole.counts)
    assert whole.total == 200
    assert np.all(whole.tp() + whole.fp() + whole.fn() + whole.tn() == 200)


def test_undefined_metrics_are_none_and_excluded_from_means():
    cm = confusion_matrix([0, 0, 1], [0, 1, 1], 3)
    r = compute_report(cm, ["a", "b", "c"])
    assert r.iou[2] is None
    assert r.mean_iou == pytest.approx((0.5 + 0.5) / 2)
    data = json.loads(r.dumps())
    assert data["classes"]["c"]["iou"] is None


def test_f1_defined_when_precision_undefined():
    # class 1 never predicted but present: precision 0/0, F1 = 0
    r = compute_report(confusion_matrix([0, 1], [0, 0], 2))
    assert r.precision[1] is None
    assert r.f1[1] == 0.0
    assert r.iou[1] == 0.0


def test_text_table_marks_undefined():
    r = compute_report(confusion_matrix([0, 1], [0, 1], 3), ["Background", "Building", "Water"])
    text = r.to_text()
    lines = text.splitlines()
    assert "Water" in lines[0]
    assert "-" in lines[2]
    assert lines[3].startswith("overall acc 1.0000")


@pytest.mark.parametrize(
    "t, p, k",
    [([0, 1], [0], 2), ([0, 2], [0, 1], 2), ([0, -1], [0, 1], 2)],
)
def test_accumulate_errors(t, p, k):
    with pytest.raises(ValidationError):
        confusion_matrix(t, p, k)


def test_report_errors():
    with pytest.raises(ValidationError):
        compute_report(ConfusionMatrix.empty(3))
    with pytest.raises(ValidationError):
        compute_report(confusion_matrix([0], [0], 2), ["only one"])
    with pytest.raises(ValidationError):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))
    with pytest.raises(ValidationError):
        ConfusionMatrix.empty(2).merge(ConfusionMatrix.empty(3))
