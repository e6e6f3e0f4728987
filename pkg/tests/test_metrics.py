"""Metric kernels vs brute-force oracles and algebraic properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polypkit import metrics as M


# -- independent oracles ---------------------------------------------------------

def auc_pairwise_oracle(scores, labels):
    pos = scores[labels.astype(bool)]
    neg = scores[~labels.astype(bool)]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ap_staircase_oracle(scores, labels):
    # Evaluate P and R at every distinct threshold, descending; sum dR * P.
    labels = labels.astype(bool)
    n_pos = labels.sum()
    ap = 0.0
    prev_r = 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = scores >= t
        tp = (predicted & labels).sum()
        p = tp / predicted.sum()
        r = tp / n_pos
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def ece_mce_oracle(conf, correct, n_bins):
    n = len(conf)
    ece = 0.0
    mce = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        if b == n_bins - 1:
            inb = (conf >= lo) & (conf <= hi)
        else:
            inb = (conf >= lo) & (conf < hi)
        if not inb.any():
            continue
        gap = abs(correct[inb].mean() - conf[inb].mean())
        ece += inb.sum() / n * gap
        mce = max(mce, gap)
    return ece, mce


# -- roc_auc ---------------------------------------------------------------------

def test_auc_perfect_and_ties():
    s = np.array([0.9, 0.8, 0.2, 0.1])
    y = np.array([1, 1, 0, 0])
    assert M.roc_auc(s, y) == 1.0
    assert M.roc_auc(np.full(6, 0.5), np.array([1, 0, 1, 0, 1, 0])) == 0.5


def test_auc_matches_pairwise_oracle_with_heavy_ties():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 10, size=200).astype(float)  # many ties
    labels = rng.integers(0, 2, size=200)
    labels[:2] = [0, 1]  # both classes present
    assert M.roc_auc(scores, labels) == pytest.approx(
        auc_pairwise_oracle(scores, labels), abs=1e-12)


def test_auc_single_class_raises():
    with pytest.raises(ValueError):
        M.roc_auc(np.array([1.0, 2.0]), np.array([1, 1]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(5, 40))
def test_auc_antisymmetry_property(seed, n):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=n), 1)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    assert M.roc_auc(scores, labels) + M.roc_auc(-scores, labels) == \
        pytest.approx(1.0, abs=1e-12)


# -- average precision -----------------------------------------------------------

def test_ap_trivials():
    s = np.array([0.9, 0.8, 0.3, 0.2])
    y = np.array([1, 1, 0, 0])
    assert M.binary_average_precision(s, y) == 1.0
    # Single positive ranked last among n: AP = 1/n.
    n = 7
    s = np.arange(n, 0, -1).astype(float)
    y = np.zeros(n)
    y[-1] = 1
    assert M.binary_average_precision(s, y) == pytest.approx(1.0 / n)


def test_ap_matches_staircase_oracle_with_ties():
    rng = np.random.default_rng(3)
    scores = np.round(rng.normal(size=120), 1)
    labels = rng.integers(0, 2, size=120)
    labels[0] = 1
    assert M.binary_average_precision(scores, labels) == pytest.approx(
        ap_staircase_oracle(scores, labels), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ap_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=30)
    labels = rng.integers(0, 2, size=30)
    labels[0] = 1
    a = M.binary_average_precision(scores, labels)
    b = M.binary_average_precision(np.exp(scores) * 3 + 1, labels)
    assert a == pytest.approx(b, abs=1e-12)


def test_multiclass_ap_skips_empty_classes_with_warning():
    rng = np.random.default_rng(4)
    scores = rng.random((30, 5))
    labels = rng.integers(0, 3, size=30)  # classes 3 and 4 absent
    with pytest.warns(UserWarning, match="no positives"):
        per_class, mean_ap = M.average_precision(scores, labels)
    assert np.isnan(per_class[3]) and np.isnan(per_class[4])
    assert mean_ap == pytest.approx(np.nanmean(per_class[:3]))
    with pytest.raises(ValueError):
        M.average_precision(scores, np.full(30, 7))


# -- calibration -----------------------------------------------------------------

def test_calibration_single_bin_arithmetic():
    conf = np.full(50, 0.9)
    correct = np.zeros(50)
    correct[:30] = 1  # accuracy 0.6
    ece, mce, diagram = M.calibration_errors(conf, correct)
    assert ece == pytest.approx(0.3, abs=1e-12)
    assert mce == pytest.approx(0.3, abs=1e-12)
    assert diagram.counts.sum() == 50
    assert diagram.counts[9] == 50  # 0.9 falls in the final right-closed bin


def test_calibration_perfect_is_zero():
    conf = np.array([0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75])
    correct = np.array([1, 0, 0, 0, 1, 1, 1, 0])
    ece, mce, _ = M.calibration_errors(conf, correct)
    assert ece == pytest.approx(0.0, abs=1e-12)
    assert mce == pytest.approx(0.0, abs=1e-12)


def test_calibration_matches_accumulation_oracle():
    rng = np.random.default_rng(5)
    conf = rng.random(500)
    conf[:3] = [0.0, 1.0, 0.999999]  # exercise both boundaries
    correct = rng.integers(0, 2, size=500).astype(float)
    ece, mce, diagram = M.calibration_errors(conf, correct)
    oe, om = ece_mce_oracle(conf, correct, 10)
    assert ece == pytest.approx(oe, abs=1e-12)
    assert mce == pytest.approx(om, abs=1e-12)
    assert diagram.counts.sum() == 500


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 200))
def test_ece_bounded_by_mce_property(seed, n):
    rng = np.random.default_rng(seed)
    conf = rng.random(n)
    correct = rng.integers(0, 2, size=n)
    ece, mce, _ = M.calibration_errors(conf, correct)
    assert 0.0 <= ece <= mce + 1e-12 <= 1.0 + 1e-12


def test_calibration_rejects_out_of_range():
    with pytest.raises(ValueError):
        M.calibration_errors(np.array([1.2]), np.array([1.0]))


# -- detection PRF ---------------------------------------------------------------

def test_prf_identical_predictions():
    gts = [(0, 0, 10, 10), (20, 20, 30, 30)]
    res = M.detection_prf(gts, [0.9, 0.8], gts)
    assert (res.tp, res.fp, res.fn) == (2, 0, 0)
    assert res.precision == res.recall == res.f1 == res.f2 == 1.0
    assert not res.degenerate


def test_prf_formula_values():
    # One gt matched, one prediction wrong, one gt missed: P=0.5, R=0.5.
    gts = [(0, 0, 10, 10), (40, 40, 50, 50)]
    preds = [(0, 0, 10, 10), (90, 90, 99, 99)]
    res = M.detection_prf(preds, [0.9, 0.8], gts)
    assert res.precision == 0.5 and res.recall == 0.5
    # P=1, R=0.5 -> F1 = 2/3, F2 = 5/9.
    res = M.detection_prf([(0, 0, 10, 10)], [0.9], gts)
    assert res.f1 == pytest.approx(2.0 / 3.0)
    assert res.f2 == pytest.approx(5.0 / 9.0)


def test_prf_counts_property_and_greedy_order():
    # Highest-confidence prediction claims the gt; the second becomes FP.
    gts = [(0, 0, 10, 10)]
    preds = [(0, 0, 10, 10), (1, 1, 11, 11)]
    res = M.detection_prf(preds, [0.2, 0.9], gts)
    assert res.tp == 1 and res.fp == 1 and res.fn == 0
    assert res.tp + res.fn == len(gts)
    assert res.tp + res.fp == len(preds)


def test_prf_degenerate_flags():
    res = M.detection_prf([], [], [(0, 0, 5, 5)])
    assert res.degenerate and res.precision == 0.0 and res.recall == 0.0
    res2 = M.detection_prf([], [], [])
    assert res2.degenerate


def test_prf_centroid_criterion():
    gts = [(0, 0, 10, 10)]
    # IoU with gt is low but centroid falls inside.
    preds = [(4, 4, 6, 6)]
    assert M.detection_prf(preds, [0.9], gts).tp == 0
    assert M.detection_prf(preds, [0.9], gts, criterion="centroid").tp == 1


def test_box_iou_values():
    assert M.box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)
    assert M.box_iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0


# -- accuracy --------------------------------------------------------------------

def test_accuracy_trivials():
    y = np.array([0, 1, 2, 3, 4])
    assert M.accuracy(y, y) == 1.0
    assert M.accuracy((y + 1) % 5, y) == 0.0
    with pytest.raises(ValueError):
        M.accuracy(np.array([]), np.array([]))


def test_accuracy_counting_oracle():
    rng = np.random.default_rng(6)
    a = rng.integers(0, 5, 97)
    b = rng.integers(0, 5, 97)
    assert M.accuracy(a, b) == pytest.approx((a == b).sum() / 97)
