import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from mitoseg.losses import bce_loss, combined_loss, soft_counts, tversky_loss
from mitoseg.metrics import (ConfusionCounts, Detection, detection_metrics, f_score,
                             format_report, match_detections, metrics_csv)
from mitoseg.ndcore import ContractError, Tensor


def dice_loss_oracle(p, g, smooth):
    p, g = np.asarray(p, float).ravel(), np.asarray(g, float).ravel()
    inter = np.sum(p * g)
    return 1 - (2 * inter + smooth) / (np.sum(p) + np.sum(g) + smooth)


def random_pair(rng, shape=(1, 1, 8, 8)):
    g = (rng.uniform(size=shape) < 0.3).astype(np.float64)
    p = rng.uniform(0.01, 0.99, size=shape)
    return p, g


# -- BCE ---------------------------------------------------------------------------
def test_bce_perfect_prediction():
    g = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert bce_loss(Tensor(g, dtype=np.float64), g).item() < 1e-5


def test_bce_half():
    assert bce_loss(np.full((4, 4), 0.5), np.eye(4)).item() == pytest.approx(math.log(2), abs=1e-6)


def test_bce_elementwise_oracle():
    rng = np.random.default_rng(0)
    p, g = random_pair(rng)
    expected = np.mean(-(g * np.log(p) + (1 - g) * np.log(1 - p)))
    assert bce_loss(Tensor(p, dtype=np.float64), g).item() == pytest.approx(expected, abs=1e-6)


def test_bce_rejects_soft_targets():
    with pytest.raises(ContractError):
        bce_loss(np.full(3, 0.5), np.array([0.0, 0.5, 1.0]))


def test_bce_gradient():
    rng = np.random.default_rng(1)
    p, g = random_pair(rng, (1, 1, 3, 3))
    assert check_gradients(lambda t: bce_loss(t, g), [p], rng) < 1e-4


# -- Tversky -----------------------------------------------------------------------
def test_tversky_hand_case():
    p = Tensor([0.5, 0.5], dtype=np.float64)
    g = np.array([1.0, 0.0])
    assert soft_counts(p, g) == (0.5, 0.5, 0.5)
    assert tversky_loss(p, g, 0.3, 0.7, smooth=0.0).item() == 0.5


def test_tversky_extremes():
    g = (np.arange(4096).reshape(64, 64) % 3 == 0).astype(float)
    assert tversky_loss(Tensor(g, dtype=np.float64), g).item() == pytest.approx(0.0, abs=1e-12)
    assert tversky_loss(Tensor(1 - g, dtype=np.float64), g).item() > 0.999


def test_tversky_negative_weights_rejected():
    with pytest.raises(ValueError):
        tversky_loss(np.zeros(2), np.zeros(2), alpha=-0.1)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_tversky_in_unit_interval(seed):
    p, g = random_pair(np.random.default_rng(seed))
    val = tversky_loss(Tensor(p, dtype=np.float64), g).item()
    assert 0.0 <= val <= 1.0


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 5.0))
@settings(max_examples=40, deadline=None)
def test_tversky_half_half_is_dice(seed, smooth):
    p, g = random_pair(np.random.default_rng(seed))
    # Dice uses 2*TP and P+G; divide through by 2 to compare with Tversky(0.5, 0.5, smooth/2)
    got = tversky_loss(Tensor(p, dtype=np.float64), g, 0.5, 0.5, smooth=smooth / 2).item()
    assert got == pytest.approx(dice_loss_oracle(p, g, smooth), abs=1e-12)


def test_tversky_dice_equivalence_same_smooth_zero():
    rng = np.random.default_rng(7)
    p, g = random_pair(rng)
    got = tversky_loss(Tensor(p, dtype=np.float64), g, 0.5, 0.5, smooth=0.0).item()
    assert got == pytest.approx(dice_loss_oracle(p, g, 0.0), abs=1e-12)


def test_tversky_gradient():
    rng = np.random.default_rng(2)
    p, g = random_pair(rng, (1, 1, 3, 3))
    assert check_gradients(lambda t: tversky_loss(t, g), [p], rng) < 1e-4


# -- combined ----------------------------------------------------------------------
def test_combined_weights(monkeypatch):
    import mitoseg.losses as L
    monkeypatch.setattr(L, "bce_loss", lambda p, g: Tensor(1.0, dtype=np.float64))
    monkeypatch.setattr(L, "tversky_loss", lambda p, g, a, b, s: Tensor(0.0, dtype=np.float64))
    assert L.combined_loss(np.zeros(2), np.zeros(2)).item() == 0.3
    monkeypatch.setattr(L, "bce_loss", lambda p, g: Tensor(0.0, dtype=np.float64))
    monkeypatch.setattr(L, "tversky_loss", lambda p, g, a, b, s: Tensor(1.0, dtype=np.float64))
    assert L.combined_loss(np.zeros(2), np.zeros(2)).item() == 0.7


def test_combined_perfect_prediction():
    g = (np.arange(64).reshape(8, 8) % 5 == 0).astype(float)
    assert combined_loss(Tensor(g, dtype=np.float64), g).item() < 1e-4


def test_combined_is_weighted_sum():
    rng = np.random.default_rng(3)
    p, g = random_pair(rng)
    t = Tensor(p, dtype=np.float64)
    expected = 0.3 * bce_loss(t, g).item() + 0.7 * tversky_loss(t, g).item()
    assert combined_loss(t, g).item() == pytest.approx(expected, rel=1e-15, abs=1e-15)


# -- matching ----------------------------------------------------------------------
def optimal_matching(preds, gts, radius):
    """Exhaustive: maximise matched pairs, then minimise total distance."""
    best = (0, 0.0)
    n, m = len(preds), len(gts)
    for k in range(min(n, m), 0, -1):
        found = None
        for pi in itertools.permutations(range(n), k):
            for gi in itertools.combinations(range(m), k):
                ds = [math.dist(preds[a], gts[b]) for a, b in zip(pi, gi)]
                if all(d <= radius for d in ds):
                    total = sum(ds)
                    if found is None or total < found:
                        found = total
        if found is not None:
            best = (k, found)
            break
    return best


def test_match_no_predictions():
    counts, _ = match_detections([], [(1, 1), (2, 2), (3, 3)])
    assert counts == ConfusionCounts(0, 0, 3)


def test_match_exact_hit():
    counts, pairs = match_detections([Detection(10, 10, 0.9, 120)], [(10, 10)])
    assert counts == ConfusionCounts(1, 0, 0) and pairs == [(0, 0)]


def test_match_negative_radius():
    with pytest.raises(ValueError):
        match_detections([], [], radius=-1)


def test_match_greedy_equals_optimal_on_non_conflicting_layouts():
    rng = np.random.default_rng(11)
    checked = conflicting = 0
    for trial in range(200):
        gts = [tuple(rng.uniform(0, 300, 2)) for _ in range(4)]
        preds = [tuple(np.array(gts[i]) + rng.normal(0, 8, 2)) for i in range(4)]
        preds.append(tuple(rng.uniform(0, 300, 2)))
        counts, pairs = match_detections(preds, gts, radius=20)
        k_opt, _ = optimal_matching(preds, gts, 20)
        # a layout conflicts when some prediction is within radius of 2+ ground truths
        # or some ground truth is within radius of 2+ predictions
        near = np.array([[math.dist(p, g) <= 20 for g in gts] for p in preds])
        conflict = (near.sum(axis=1) > 1).any() or (near.sum(axis=0) > 1).any()
        if conflict:
            conflicting += 1
            assert counts.tp <= k_opt
            continue
        checked += 1
        assert counts.tp == k_opt
        assert counts.fp == 5 - k_opt and counts.fn == 4 - k_opt
    assert checked > 20


def test_match_conflicting_instance_logged_difference():
    # greedy takes the closest pair first and strands the other ground truth
    preds = [(10.0, 0.0), (22.0, 0.0)]
    gts = [(0.0, 0.0), (12.0, 0.0)]
    counts, _ = match_detections(preds, gts, radius=11)
    k_opt, _ = optimal_matching(preds, gts, 11)
    assert (counts.tp, k_opt) == (1, 2)


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), max_size=6),
       st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), max_size=6))
@settings(max_examples=60, deadline=None)
def test_match_swap_symmetry(preds, gts):
    a, _ = match_detections(preds, gts, radius=15)
    b, _ = match_detections(gts, preds, radius=15)
    assert a.tp == b.tp and a.fp == b.fn and a.fn == b.fp
    assert a.tp + a.fn == len(gts)


# -- metrics -----------------------------------------------------------------------
def test_metrics_degenerate_cases():
    assert detection_metrics(ConfusionCounts(0, 0, 0)) == (0.0, 0.0, 0.0)
    assert detection_metrics(ConfusionCounts(0, 3, 0)) == (0.0, 0.0, 0.0)
    assert detection_metrics(ConfusionCounts(4, 0, 0)) == (1.0, 1.0, 1.0)


def test_metrics_counts():
    p, r, f = detection_metrics(ConfusionCounts(3, 1, 2))
    assert (p, r) == (0.75, 0.6)
    assert f == pytest.approx(2 * 0.75 * 0.6 / 1.35)


@given(st.floats(0, 1), st.floats(0, 1))
def test_f_score_bounds(p, r):
    f = f_score(p, r)
    assert 0 <= f <= 1
    assert f <= min(2 * p, 2 * r) + 1e-12
    assert f <= max(p, r) + 1e-12


def test_report_and_csv():
    c = ConfusionCounts(3, 1, 2)
    assert "f_score   0.6667" in format_report(c)
    text = metrics_csv([("img", c)])
    header, row = text.strip().splitlines()
    assert header == "label,precision,recall,f_score,TP,FP,FN"
    assert row.startswith("img,0.750000,0.600000,0.666667,3,1,2")
