from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridcast import metrics
from hybridcast.autodiff import ContractError


def test_msd_exact_sample():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(6, 3))
    s = np.stack([truth, truth + 1.0])
    mn, me = metrics.min_mean_msd(s, truth)
    assert mn == 0.0 and me == 0.5


def test_msd_identical_samples():
    rng = np.random.default_rng(1)
    truth = rng.normal(size=(6, 3))
    s = np.repeat(rng.normal(size=(1, 6, 3)), 5, axis=0)
    mn, me = metrics.min_mean_msd(s, truth)
    assert abs(mn - me) < 1e-15


def test_msd_hand_case():
    truth = np.zeros((4, 3))
    s = np.stack([np.ones((4, 3)), 2 * np.ones((4, 3))])
    mn, me = metrics.min_mean_msd(s, truth)
    assert abs(mn - 1.0) < 1e-12 and abs(me - 2.5) < 1e-12


def test_msd_nested_and_permutation():
    rng = np.random.default_rng(2)
    truth = rng.normal(size=(5, 6, 3))
    s = rng.normal(size=(5, 12, 6, 3))
    prev = np.inf
    for k in range(1, 13):
        mn, _ = metrics.min_mean_msd(s[:, :k], truth)
        assert np.all(mn <= prev)
        prev = mn
    perm = rng.permutation(12)
    a = metrics.min_mean_msd(s, truth)
    b = metrics.min_mean_msd(s[:, perm], truth)
    np.testing.assert_allclose(a, b, rtol=1e-14)
    assert np.all(a[0] <= a[1])


def test_msd_shape_errors():
    with pytest.raises(ContractError):
        metrics.min_mean_msd(np.zeros((2, 5, 3)), np.zeros((4, 3)))
    with pytest.raises(ContractError):
        metrics.min_mean_msd(np.zeros((0, 4, 3)), np.zeros((4, 3)))


def test_pr_perfect_prediction():
    gt = np.array([[[1, 0, 1], [0, 1, 0]]])
    assert metrics.example_pr_f1(gt, gt) == (1.0, 1.0, 1.0)


def test_pr_zero_denominator_rule():
    z = np.zeros((1, 2, 4))
    assert metrics.example_pr_f1(z, z) == (1.0, 1.0, 1.0)
    # a missed action gives P = 0 (nothing predicted, but something exists) and R = 0
    gt = z.copy()
    gt[0, 0, 1] = 1
    P, R, F = metrics.example_pr_f1(z, gt)
    assert (P, R) == (0.5, 0.5)


def test_pr_hand_case():
    gt = np.array([[[1, 0, 0]]])
    pred = np.array([[[1, 1, 0]]])
    P, R, F = metrics.example_pr_f1(pred, gt)
    assert abs(P - 0.5) < 1e-12 and abs(R - 1.0) < 1e-12 and abs(F - 2 / 3) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pr_identity_and_range(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(size=(5, 3, 6)) < 0.3
    gt = rng.uniform(size=(5, 3, 6)) < 0.3
    P, R, F = metrics.example_pr_f1(pred, gt)
    assert 0 <= P <= 1 and 0 <= R <= 1 and 0 <= F <= 1
    assert F == (2 * P * R / (P + R) if P + R > 0 else 0.0)
    perm = rng.permutation(5)
    assert metrics.example_pr_f1(pred[perm], gt[perm]) == pytest.approx((P, R, F), abs=1e-15)


def test_topk_full_recall_and_monotone():
    rng = np.random.default_rng(3)
    prob = rng.uniform(size=(20, 3, 10))
    gt = rng.uniform(size=(20, 3, 10)) < 0.2
    gt[:, :, 0] = True
    r = metrics.topk_recall(prob, gt)
    assert r[-1] == 1.0
    assert np.all(np.diff(r) >= 0)


def test_topk_tie_break():
    prob = np.full((6, 1, 4), 0.5)
    gt = np.zeros((6, 1, 4), bool)
    cls = [0, 1, 0, 2, 3, 0]
    gt[np.arange(6), 0, cls] = True
    r = metrics.topk_recall(prob, gt, ks=[1])
    assert r[0] == np.mean([c == 0 for c in cls])


def test_topk_k_too_large():
    with pytest.raises(ContractError):
        metrics.topk_recall(np.zeros((1, 1, 4)), np.zeros((1, 1, 4)), ks=[5])


def test_diversity_identical_samples():
    hard = np.repeat((np.random.default_rng(4).uniform(size=(1, 3, 6)) < 0.4), 5, axis=0)
    hard[:, 0, 0] = True
    d = metrics.action_diversity(hard)
    assert abs(d["act_cosim_tr"] - 1.0) < 1e-12 and d["act_distinct_tr"] == 1
    x = np.repeat(np.random.default_rng(5).normal(size=(1, 6, 3)), 4, axis=0)
    t = metrics.traj_diversity(x, np.zeros(3))
    assert abs(t["traj_cosim"] - 1.0) < 1e-12 and t["traj_distinct"] == 1


def test_diversity_orthogonal_samples():
    hard = np.zeros((2, 2, 4), bool)
    hard[0, 0, 0] = True
    hard[1, 1, 1] = True
    d = metrics.action_diversity(hard)
    assert d["act_cosim_tr"] == 0.0 and d["act_distinct_tr"] == 2
    assert d["n_act_tr"] == 0.0 and d["n_act_tu"] == 0.0


def test_diversity_tu_not_below_tr():
    rng = np.random.default_rng(6)
    for _ in range(50):
        hard = rng.uniform(size=(2, 3, 5)) < 0.4
        d = metrics.action_diversity(hard)
        assert d["n_act_tu"] >= d["n_act_tr"]
    # class 0 at different steps is similar only under TU
    hard = np.zeros((2, 3, 5), bool)
    hard[0, 0, 0] = hard[1, 2, 0] = True
    d = metrics.action_diversity(hard)
    assert d["n_act_tr"] == 0.0 and d["n_act_tu"] == 1.0


def test_diversity_permutation_invariant():
    rng = np.random.default_rng(7)
    hard = rng.uniform(size=(8, 3, 5)) < 0.4
    x = rng.normal(size=(8, 6, 3))
    perm = rng.permutation(8)
    a, b = metrics.action_diversity(hard), metrics.action_diversity(hard[perm])
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12)
    a, b = metrics.traj_diversity(x, 0), metrics.traj_diversity(x[perm], 0)
    assert a == pytest.approx(b, abs=1e-12)


def test_distinct_count_exact():
    # four vectors: a 3-clique of mutually dissimilar pairs plus one similar to all
    S = np.array([[1, 0, 0, 0.5], [0, 1, 0, 0.5], [0, 0, 1, 0.5], [0.5, 0.5, 0.5, 1]])
    assert metrics.distinct_count(S) == 3


def test_diversity_needs_two_samples():
    with pytest.raises(ContractError):
        metrics.action_diversity(np.zeros((1, 2, 3)))
    with pytest.raises(ContractError):
        metrics.traj_diversity(np.zeros((1, 2, 3)), 0)


def test_write_report(tmp_path):
    rep = {"F1": 0.5, "topk_recall": [0.1, 0.2]}
    metrics.write_report(rep, tmp_path)
    head = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert head == "F1,topk_recall_1,topk_recall_2"
