import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfdepth import metrics as M
from hfdepth.loss import IGNORE


def rand_depths(seed, n=500):
    r = np.random.default_rng(seed)
    return r.uniform(0.5, 20, n), r.uniform(0.5, 20, n)


def test_perfect_prediction():
    gt = np.array([1.0, 2.5, 7.0])
    m = M.compute_metrics(gt, gt)
    assert (m.delta1, m.delta2, m.delta3) == (1.0, 1.0, 1.0)
    assert (m.rel, m.log10, m.rms) == (0.0, 0.0, 0.0)
    assert m.count == 3


def test_uniform_thirty_percent_overestimate():
    gt = np.random.default_rng(0).uniform(1, 10, 1000)
    m = M.compute_metrics(1.3 * gt, gt)
    assert m.delta1 == 0.0 and m.delta2 == 1.0 and m.delta3 == 1.0
    assert m.rel == pytest.approx(0.3, abs=1e-12)
    assert m.log10 == pytest.approx(math.log10(1.3), abs=1e-12)


def test_report_columns():
    assert M.MetricSet.HEADER[:6] == ("delta1", "delta2", "delta3", "rel", "log10", "rms")


def test_hand_computed_values():
    pred, gt = np.array([1.0, 4.0]), np.array([2.0, 4.0])
    m = M.compute_metrics(pred, gt)
    assert m.delta1 == 0.5 and m.delta3 == 0.5  # ratio 2 > 1.25^3
    assert m.rel == pytest.approx(0.25)
    assert m.log10 == pytest.approx(math.log10(2) / 2)
    assert m.rms == pytest.approx(math.sqrt(0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_delta_symmetry_and_ordering(seed):
    p, g = rand_depths(seed)
    a, b = M.compute_metrics(p, g), M.compute_metrics(g, p)
    assert (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)
    assert a.delta1 <= a.delta2 <= a.delta3
    assert min(a.rel, a.log10, a.rms) >= 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.floats(1.0, 20.0))
def test_cap_equals_prefiltering(seed, cap):
    p, g = rand_depths(seed)
    mask = np.random.default_rng(seed + 1).random(len(g)) < 0.8
    keep = mask & (g <= cap)
    if not keep.any():
        with pytest.raises(ValueError):
            M.compute_metrics(p, g, mask, cap)
        return
    assert M.compute_metrics(p, g, mask, cap) == M.compute_metrics(p[keep], g[keep])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.9, 1.6), st.floats(0.9, 1.6))
def test_threshold_monotone(seed, t1, t2):
    p, g = rand_depths(seed)
    lo, hi = sorted((t1, t2))
    assert M.threshold_accuracy(p, g, lo) <= M.threshold_accuracy(p, g, hi)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.1, 10))
def test_scale_property(seed, c):
    p, g = rand_depths(seed)
    a, b = M.compute_metrics(p, g), M.compute_metrics(c * p, c * g)
    assert b.rms == pytest.approx(c * a.rms, rel=1e-9)
    assert b.rel == pytest.approx(a.rel, rel=1e-9)
    assert b.log10 == pytest.approx(a.log10, rel=1e-9, abs=1e-12)
    assert abs(b.delta1 - a.delta1) <= 2 / len(p)  # only exact-boundary ratios may flip


def test_metric_errors():
    with pytest.raises(ValueError):
        M.compute_metrics(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        M.compute_metrics(np.ones(3), np.ones(3), mask=np.zeros(3, bool))
    with pytest.raises(ValueError):
        M.compute_metrics(np.array([1.0, -1.0]), np.ones(2))


def test_metrics_csv(tmp_path):
    m = M.compute_metrics(np.array([1.0, 2.0]), np.array([1.0, 2.5]))
    M.write_metrics_csv(tmp_path / "m.csv", [("soft", m)])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "name,delta1,delta2,delta3,rel,log10,rms,count"
    assert lines[1].startswith("soft,") and lines[1].endswith(",2")


def test_pixel_accuracy():
    gt = np.array([[0, 1, 2, IGNORE]])
    assert M.pixel_accuracy(gt, gt) == 1.0
    assert M.pixel_accuracy(np.array([[1, 2, 3, 0]]), gt) == 0.0
    assert M.pixel_accuracy(np.array([[0, 2, 2, 5]]), gt) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        M.pixel_accuracy(gt, np.full((1, 4), IGNORE))


def test_confusion_perfect_and_merge():
    r = np.random.default_rng(0)
    gt = r.integers(0, 200, 5000)
    C = M.confusion(gt, gt, 200)
    assert np.count_nonzero(C.counts - np.diag(np.diag(C.counts))) == 0
    pred = np.clip(gt + r.integers(-3, 4, gt.shape), 0, 199)
    C4 = M.confusion(pred, gt, 200, merge=4)
    assert C4.counts.shape == (50, 50)
    assert C4.total == M.confusion(pred, gt, 200).total == 5000
    np.testing.assert_array_equal(C4.counts.sum(axis=1), np.bincount(gt // 4, minlength=50))


def test_confusion_band_and_asymmetry():
    C = M.ConfusionMatrix(np.array([[5, 1, 0], [3, 4, 0], [0, 0, 2]]))
    assert C.band_mass(0) == pytest.approx(11 / 15)
    assert C.band_mass(1) == 1.0
    assert C.asymmetry() == pytest.approx(4 / 15)
    assert M.ConfusionMatrix(np.eye(3, dtype=int)).asymmetry() == 0.0


def test_confusion_uniform_predictions_rows_are_flat():
    r = np.random.default_rng(1)
    K, n = 10, 50_000
    gt = r.integers(0, K, n)
    pred = r.integers(0, K, n)
    C = M.confusion(pred, gt, K).counts.astype(float)
    expected = C.sum(axis=1, keepdims=True) / K
    chi2 = ((C - expected) ** 2 / expected).sum()
    dof = K * (K - 1)
    assert chi2 < dof + 5 * math.sqrt(2 * dof)


def test_confusion_errors(tmp_path):
    with pytest.raises(ValueError):
        M.confusion(np.zeros(3, int), np.zeros(3, int), 10, merge=3)
    with pytest.raises(ValueError):
        M.confusion(np.array([10]), np.array([0]), 10)
    C = M.confusion(np.array([0, 1]), np.array([0, 0]), 2)
    C.write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == ["gt\\pred,0,1", "0,1,1", "1,0,0"]
