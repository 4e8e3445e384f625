from __future__ import annotations

import numpy as np
import pytest

from hybridcast import actions as act
from hybridcast import autodiff as ad
from hybridcast import checks
from hybridcast.actions import BoundaryError
from hybridcast.autodiff import ContractError, ParamStore, Tensor
from hybridcast.model import LossConfig


def small_cfg(use_traj=False, C=4):
    return act.ActionConfig(n_classes=C, horizon=3, past_len=4, n_images=2, feature_dim=5, stride=2, consensus=6, traj_hidden=5, joint_hidden=7, use_traj=use_traj)


def test_zero_weights_give_half():
    cfg = small_cfg()
    store = act.init_action_params(ParamStore(), cfg, np.random.default_rng(0))
    for n in store:
        store[n].data[:] = 0.0
    u = act.action_policy(store, cfg, np.random.default_rng(1).normal(size=(2, 2, 5))).data
    assert np.array_equal(u, np.full((2, 3, 4, 2), 0.5))


def test_class_permutation_of_last_layer():
    cfg = small_cfg()
    store = act.init_action_params(ParamStore(), cfg, np.random.default_rng(0))
    checks.perturb_params(store, np.random.default_rng(1), 0.5)
    feats = np.random.default_rng(2).normal(size=(3, 2, 5))
    u = act.action_policy(store, cfg, feats).data
    perm = np.array([2, 0, 3, 1])
    cols = (2 * perm[:, None] + np.arange(2)).ravel()
    store["act.joint.1.W"].data = store["act.joint.1.W"].data[:, cols]
    store["act.joint.1.b"].data = store["act.joint.1.b"].data[cols]
    np.testing.assert_allclose(act.action_policy(store, cfg, feats).data, u[:, :, perm], rtol=1e-14)


def test_policy_invariants():
    cfg = small_cfg(use_traj=True)
    store = act.init_action_params(ParamStore(), cfg, np.random.default_rng(0))
    checks.perturb_params(store, np.random.default_rng(1), 0.5)
    rng = np.random.default_rng(2)
    past = rng.normal(size=(3, 4, 3))
    traj = rng.normal(size=(3, 6, 3))
    u = act.action_policy(store, cfg, rng.normal(size=(3, 2, 5)), act.action_windows(cfg, past, traj))
    np.testing.assert_allclose(u.data.sum(-1), 1.0, atol=1e-14)
    a = act.sample_actions(u, 0.5, rng=rng).a.data
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-14)
    h = act.harden(a)
    assert set(np.unique(h)) <= {0.0, 1.0}
    assert np.array_equal(h.sum(-1), np.ones(h.shape[:-1]))


def test_windows_align_with_stride():
    cfg = small_cfg(use_traj=True)
    past = np.arange(12.0).reshape(1, 4, 3)
    traj = 100 + np.arange(18.0).reshape(1, 6, 3)
    w = act.action_windows(cfg, past, traj)
    assert w.shape == (1, 3, 4, 3)
    # step k window ends at trajectory index stride * k (1-based)
    for k in range(3):
        np.testing.assert_array_equal(w[0, k, -1], traj[0, 2 * (k + 1) - 1])
    with pytest.raises(ContractError):
        act.action_windows(cfg, past, traj[:, :4])


@pytest.mark.parametrize("tau", [0.1, 0.5, 1.0, 3.0])
def test_symmetric_sampling_rate(tau):
    u = np.full((100_000, 2), 0.5)
    rate = act.harden(act.sample_actions(u, tau, rng=np.random.default_rng(0)).a)[:, 1].mean()
    assert abs(rate - 0.5) <= 0.01


def test_low_temperature_is_categorical():
    u = np.broadcast_to([0.3, 0.7], (100_000, 2))
    rate = act.harden(act.sample_actions(u, 0.01, rng=np.random.default_rng(1)).a)[:, 1].mean()
    assert abs(rate - 0.7) <= 0.01


def test_zero_noise_fixed_point():
    a = act.sample_actions(np.array([0.3, 0.7]), 1.0, g=np.zeros(2)).a.data
    np.testing.assert_allclose(a, [0.3, 0.7], rtol=1e-15)


def test_density_at_symmetric_point():
    ld = act.gumbel_softmax_log_density(np.array([0.5, 0.5]), np.array([0.5, 0.5]), 1.0).data
    assert abs(float(ld)) < 1e-15


def test_density_normalizes_and_samples_match():
    assert checks.gumbel_normalization()["ok"]
    assert checks.gumbel_chi2(n=200_000)["ok"]
    assert checks.gumbel_hardening(n=100_000)["ok"]


def test_forward_ce_hand_value():
    tau, e = 0.5, 0.05
    a1, a2 = 1 - e, e  # label "absent" relaxed to (0.95, 0.05)
    d = tau * (0.5 * a1**-tau + 0.5 * a2**-tau) ** -2 * (0.5 * a1 ** -(tau + 1)) * (0.5 * a2 ** -(tau + 1))
    labels = np.zeros((1, 3, 4))
    u = np.full((1, 3, 4, 2), 0.5)
    v = float(act.forward_ce_action(u, labels, tau, e).data)
    assert abs(v - 3 * 4 * -np.log(d)) < 1e-12
    # the occurs label (0.05, 0.95) is the mirror image under u = (0.5, 0.5)
    assert abs(float(act.forward_ce_action(u, np.ones((1, 3, 4)), tau, e).data) - v) < 1e-12


def test_forward_ce_class_permutation():
    rng = np.random.default_rng(3)
    u = rng.dirichlet([1, 1], size=(2, 3, 4))
    labels = (rng.uniform(size=(2, 3, 4)) < 0.3).astype(float)
    perm = np.array([3, 1, 0, 2])
    a = float(act.forward_ce_action(u, labels).data)
    b = float(act.forward_ce_action(u[:, :, perm], labels[:, :, perm]).data)
    assert abs(a - b) < 1e-12


def test_unrelaxed_labels_rejected():
    with pytest.raises(BoundaryError):
        act.gumbel_softmax_log_density(np.array([0.0, 1.0]), np.array([0.5, 0.5]), 0.5)
    with pytest.raises(BoundaryError):
        act.forward_ce_action(np.full((1, 1, 1, 2), 0.5), np.ones((1, 1, 1)), label_eps=0.0)
    with pytest.raises(ContractError):
        act.sample_actions(np.array([0.5, 0.5]), 0.0)


def test_prior_bump_and_floor():
    labels = np.zeros((6, 2))
    labels[3, 0] = 1
    p = act.action_prior(labels, scale=0.5, floor=0.01)
    assert p[3, 0] == 1.0
    assert abs(p[2, 0] - np.exp(-2.0)) < 1e-15
    assert abs(p[4, 0] - np.exp(-2.0)) < 1e-15
    np.testing.assert_array_equal(p[:, 1], np.full(6, 0.01))


def test_reverse_ce_matched_case():
    eps = 1e-3
    prior = np.ones((1, 3, 4))
    a = np.stack([np.full((1, 3, 4), eps), np.full((1, 3, 4), 1 - eps)], -1)
    v = float(act.reverse_ce_action(a, prior, 0.01).data)
    # only the floor term of the absent component remains
    assert abs(v - (-12 * eps * np.log(0.01))) < 1e-12
    hard = np.stack([np.zeros((1, 3, 4)), np.ones((1, 3, 4))], -1)
    assert float(act.reverse_ce_action(hard, prior, 0.01).data) == 0.0


def test_policy_gradients():
    cfg = small_cfg(use_traj=True)
    store = act.init_action_params(ParamStore(), cfg, np.random.default_rng(0))
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(2, 2, 5))
    w = act.action_windows(cfg, rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 6, 3)))
    labels = (rng.uniform(size=(2, 3, 4)) < 0.4).astype(float)
    names = list(store)

    def loss():
        return act.forward_ce_action(act.action_policy(store, cfg, feats, w), labels)

    for _ in range(5):
        p = store.flat() + 0.2 * rng.standard_normal(store.flat().shape)
        store.set_flat(p)
        store.zero_grad()
        ad.backward(loss())
        g = np.concatenate([store.grads()[n].ravel() for n in names])

        def f(v):
            store.set_flat(v)
            return float(loss().data)

        d = rng.standard_normal(p.shape)
        fd = ad.numeric_grad(f, p, direction=d)
        store.set_flat(p)
        assert ad.rel_error(g @ d, fd) < 1e-4


def test_stop_gradient_contract():
    model, batch = checks.small_setup(0, n=4)
    lc = LossConfig(n_samples=2, eta=0.0)
    store = model.store
    traj = [n for n in store if n.startswith(model.traj_prefix)]

    def rev():
        return model.losses(batch, lc, np.random.default_rng(0), ("act",))["H_rev_act"]

    before = float(rev().data)
    store.zero_grad()
    ad.backward(rev())
    assert all(store[n].grad is None or not np.any(store[n].grad) for n in traj)
    store.zero_grad()
    store[traj[0]].data = store[traj[0]].data + 0.5
    assert float(rev().data) != before
