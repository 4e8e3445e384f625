"""Verification suites shared by the ``verify`` command and the test suite.

Every function returns a plain dict with the measured quantity, the
tolerance it was held to and an ``ok`` flag, so reports can be written
as JSON without post-processing.
"""
from __future__ import annotations

import numpy as np
from scipy import integrate, stats

from . import actions as act
from . import autodiff as ad
from . import flow, metrics, online
from .model import Batch, HybridModel, LossConfig
from .training import make_configs
from .world import WorldConfig, generate_dataset

SMALL_ARCH = {"hidden": 8, "mlp_hidden": 16, "consensus": 8, "traj_hidden": 8, "joint_hidden": 16}


def small_world(seed=0):
    """Short horizons keep the exhaustive checks fast."""
    return WorldConfig(traj_horizon=10, action_horizon=2, past_len=4, n_videos=4, seed=seed)


def small_setup(seed=0, n=8, mode="joint", arch=None):
    """A tiny hybrid model with normalization fitted on ``n`` synthetic episodes."""
    eps = generate_dataset(small_world(seed), n)
    batch = Batch.from_episodes(eps)
    fc, ac = make_configs(batch, arch={**SMALL_ARCH, **(arch or {})})
    ac.use_traj = mode != "separate"
    model = HybridModel(fc, ac, rng=np.random.default_rng(seed), mode=mode)
    return model, batch


def perturb_params(store, rng, scale=0.1):
    """Random parameter point around the initialization (so sigma is not isotropic)."""
    store.set_flat(store.flat() + scale * rng.standard_normal(store.flat().shape))
    return store


def _wrap(report, key, tol, sense="lt"):
    v = report[key]
    report["tolerance"] = tol
    report["ok"] = bool(v < tol if sense == "lt" else v > tol)
    return report


# -- flow


def flow_roundtrip(n_params=50, n_z=20, seed=0):
    """invert(simulate(z)) == z and simulate(invert(x)) == x over random (z, params)."""
    rng = np.random.default_rng(seed)
    model, batch = small_setup(seed)
    base = model.store.state()
    cfg, T = model.flow_cfg, model.flow_cfg.horizon
    worst = 0.0
    for _ in range(n_params):
        model.store.load(base)
        perturb_params(model.store, rng, 0.3)
        idx = rng.integers(0, len(batch), n_z)
        past = batch.past[idx]
        z = rng.standard_normal((n_z, T, 3))
        x = flow.simulate(model.store, cfg, past, z).data
        inv = flow.invert(model.store, cfg, past, x)
        x2 = flow.simulate(model.store, cfg, past, inv.z.data).data
        worst = max(worst, float(np.abs(inv.z.data - z).max()), float(np.abs(x2 - x).max()))
    model.store.load(base)
    return _wrap({"check": "flow_roundtrip", "pairs": n_params * n_z, "max_error": worst}, "max_error", 1e-8)


def flow_logdet(n_params=10, T=4, h=1e-6, seed=1):
    """Analytic log-det against log|det dx/dz| from a central-difference Jacobian."""
    rng = np.random.default_rng(seed)
    model, batch = small_setup(seed)
    cfg = model.flow_cfg
    worst = 0.0
    for _ in range(n_params):
        perturb_params(model.store, rng, 0.3)
        past = batch.past[rng.integers(0, len(batch), 1)]
        z = rng.standard_normal((1, T, 3))

        def f(zz):
            return flow.simulate(model.store, cfg, past, zz.reshape(1, T, 3)).data.ravel()

        J = np.zeros((3 * T, 3 * T))
        for k in range(3 * T):
            e = np.zeros(3 * T)
            e[k] = h
            J[:, k] = (f(z.ravel() + e) - f(z.ravel() - e)) / (2 * h)
        fd = float(np.linalg.slogdet(J)[1])
        x = flow.simulate(model.store, cfg, past, z).data
        analytic = float(flow.invert(model.store, cfg, past, x).log_det.data[0])
        worst = max(worst, abs(fd - analytic))
    return _wrap({"check": "flow_logdet", "trials": n_params, "max_abs_error": worst}, "max_abs_error", 1e-5)


# -- gradients


def _loss_fns(model, batch, lc, seed):
    """Scalar loss closures of the model parameters, one per training term."""

    def term(name, parts):
        def f():
            return model.losses(batch, lc, np.random.default_rng(seed), parts)[name]

        return f

    def rce_adj():
        inv = flow.invert(model.store, model.flow_cfg, batch.past, batch.future, need_sigma=True)
        return flow.reverse_ce_traj_adj(inv, batch.future, lc.sigma_prior)

    return {
        "traj_forward_ce": term("H_p_qpi", ("traj",)),
        "traj_reverse_ce": term("H_rev_traj", ("traj",)),
        "action_forward_ce": term("H_p_qkappa", ("act",)),
        "action_reverse_ce": term("H_rev_act", ("act",)),
        "traj_reverse_ce_adjusted": rce_adj,
    }


def gradient_suite(n_points=20, h=1e-5, seed=2, tol=1e-4):
    """Central-difference directional derivatives against reverse-mode gradients."""
    rng = np.random.default_rng(seed)
    model, batch = small_setup(seed, n=4)
    lc = LossConfig(n_samples=2, eta=0.0)
    store = model.store
    names = list(store)
    base = store.flat()
    fns = _loss_fns(model, batch, lc, seed)
    # action terms see the trajectory only through a stop-gradient, so their
    # finite differences move the action parameters alone
    act_mask = np.concatenate([np.full(store[n].size, n.startswith(model.act_prefix), dtype=float) for n in names])
    worst = {k: 0.0 for k in fns}
    leak = 0.0
    for i in range(n_points):
        point = base + 0.1 * rng.standard_normal(base.shape)
        d_all = rng.standard_normal(base.shape)
        for k, fn in fns.items():
            d = d_all * act_mask if k.startswith("action") else d_all
            d = d / np.linalg.norm(d)
            store.set_flat(point, names)
            store.zero_grad()
            loss = fn()
            ad.backward(loss)
            g = np.concatenate([store.grads()[n].ravel() for n in names])
            store.zero_grad()
            if k.startswith("action"):
                leak = max(leak, float(np.abs(g * (1.0 - act_mask)).max()))

            def f(v):
                store.set_flat(v, names)
                return float(fn().data)

            fd = ad.numeric_grad(f, point, h, direction=d)
            worst[k] = max(worst[k], ad.rel_error(g @ d, fd, floor=1e-6))
    store.set_flat(base, names)
    rep = {"check": "gradients", "points": n_points, "max_rel_error": max(worst.values()), "per_term": worst, "stop_gradient_leak": leak}
    rep = _wrap(rep, "max_rel_error", tol)
    rep["ok"] = rep["ok"] and leak == 0.0
    return rep


def gumbel_density_gradient(n_points=20, seed=3, tol=1e-4):
    """Gradient of the pair log density w.r.t. u (the action forward CE integrand)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        tau = rng.uniform(0.2, 2.0)
        a2 = rng.uniform(0.05, 0.95, 5)
        a = np.stack([1 - a2, a2], -1)
        u0 = rng.uniform(0.1, 0.9, (5, 2))
        u = ad.Tensor(u0, requires_grad=True)
        ad.backward(ad.tsum(act.gumbel_softmax_log_density(a, u, tau)))

        def f(v):
            return float(ad.tsum(act.gumbel_softmax_log_density(a, v.reshape(5, 2), tau)).data)

        worst = max(worst, ad.rel_error(u.grad, ad.numeric_grad(f, u0), floor=1e-6))
    return _wrap({"check": "gumbel_density_gradient", "points": n_points, "max_rel_error": worst}, "max_rel_error", tol)


# -- Gumbel-Softmax normalization and sampling


def _pair_density(a2, u2, tau):
    a = np.stack([1.0 - a2, a2], -1)
    u = np.array([1.0 - u2, u2])
    return float(np.exp(act.gumbel_softmax_log_density(a, u, tau).data))


def gumbel_normalization(taus=(0.5, 1.0), u2s=(0.3, 0.7), tol=1e-3):
    """The two-class density integrated over a_2 in (0, 1)."""
    worst, rows = 0.0, []
    for tau in taus:
        for u2 in u2s:
            total, _ = integrate.quad(lambda x: _pair_density(x, u2, tau), 0.0, 1.0, limit=200, points=[0.5])
            rows.append({"tau": tau, "u2": u2, "integral": total})
            worst = max(worst, abs(total - 1.0))
    return _wrap({"check": "gumbel_normalization", "cases": rows, "max_abs_error": worst}, "max_abs_error", tol)


def gumbel_chi2(u2=0.3, tau=0.5, n=1_000_000, bins=50, seed=4):
    """Histogram of sampled a_2 against bin masses from the density."""
    rng = np.random.default_rng(seed)
    u = np.broadcast_to(np.array([1.0 - u2, u2]), (n, 2))
    a2 = act.sample_actions(u, tau, rng=rng).a.data[:, 1]
    # fixed equal-mass bins: a_2 = sigmoid((logit u_2 + logistic noise) / tau)
    q = np.linspace(0, 1, bins + 1)[1:-1]
    edges = np.concatenate([[0.0], 1.0 / (1.0 + np.exp(-(np.log(q / (1 - q)) + np.log(u2 / (1 - u2))) / tau)), [1.0]])
    probs = np.array([integrate.quad(lambda x: _pair_density(x, u2, tau), lo, hi, limit=200)[0] for lo, hi in zip(edges[:-1], edges[1:])])
    observed = np.histogram(a2, edges)[0]
    expected = probs / probs.sum() * n
    chi2, p = stats.chisquare(observed, expected)
    return _wrap({"check": "gumbel_chi2", "u2": u2, "tau": tau, "draws": n, "chi2": float(chi2), "p_value": float(p)}, "p_value", 0.01, "gt")


def gumbel_hardening(u2s=(0.1, 0.3, 0.7), tau=0.01, n=200_000, seed=5, tol=0.02):
    rng = np.random.default_rng(seed)
    worst, rows = 0.0, []
    for u2 in u2s:
        u = np.broadcast_to(np.array([1.0 - u2, u2]), (n, 2))
        freq = float(act.harden(act.sample_actions(u, tau, rng=rng).a)[:, 1].mean())
        rows.append({"u2": u2, "frequency": freq})
        worst = max(worst, abs(freq - u2))
    return _wrap({"check": "gumbel_hardening", "tau": tau, "cases": rows, "max_abs_error": worst}, "max_abs_error", tol)


# -- online losses


def convexity_suite(model=None, batch=None, n_trials=1000, seed=6):
    if model is None:
        model, batch = small_setup(seed, n=8)
    lc = LossConfig()
    reps = [online.verify_convexity(k, model, batch, lc, n_trials, np.random.default_rng(seed + i)) for i, k in enumerate(("traj_fce", "traj_rce_adj", "act_fce"))]
    s = online.example_stats(model, batch, lc.label_eps)
    m = online.matched_stats(s, lc.sigma_prior)
    th = np.eye(3) + 0.3 * np.random.default_rng(seed).standard_normal((3, 3))
    g_f = online.traj_fce(th, m)[1]
    g_r = online.traj_rce_adj(th, m, lc.sigma_prior)[1]
    matched = float(np.abs(g_f - g_r).max() / max(1.0, np.abs(g_f).max()))
    return {
        "check": "convexity",
        "losses": reps,
        "matched_grad_error": matched,
        "matched_ok": matched < 1e-8,
        "ok": all(r["ok"] for r in reps) and matched < 1e-8,
    }


def regret_bound_check(model=None, episodes=None, T=300, seed=7, eq9="corrected"):
    """Online pass on a stream and the bound R_t <= B L sqrt(2t) at every t."""
    if model is None:
        model, _ = small_setup(seed)
        episodes = generate_dataset(small_world(seed + 100), T)
    s = online.example_stats(model, episodes[:T])
    records, summary, _, _ = online.regret_curve(s, online.OnlineObjective(eq9=eq9))
    slack = min(r.bound - r.cum_regret for r in records)
    return {
        "check": "regret_bound",
        "T": len(records),
        "L": summary["L"],
        "final_avg_regret": records[-1].avg_regret,
        "min_slack": float(slack),
        "decay_exponent": summary["decay_exponent"],
        "ok": bool(summary["bound_ok"]),
    }


# -- metric units


def metric_units(tol=1e-12):
    """Hand-computed metric cases."""
    cases = {}
    # zero-denominator rule: empty prediction and empty truth at a step -> P = R = 1
    p, r, f = metrics.example_pr_f1(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)))
    cases["empty_step"] = max(abs(p - 1), abs(r - 1), abs(f - 1))
    p, r, f = metrics.example_pr_f1(np.array([[[1, 1, 0]]]), np.array([[[1, 0, 0]]]))
    cases["pr_half_one"] = max(abs(p - 0.5), abs(r - 1.0), abs(f - 2.0 / 3.0))
    cases["f1_identity"] = abs(metrics.f1_score(0.3, 0.6) - 2 * 0.3 * 0.6 / 0.9) + abs(metrics.f1_score(0.0, 0.0))
    truth = np.zeros((4, 3))
    samples = np.stack([np.full((4, 3), 1.0), np.full((4, 3), 2.0)])
    mn, me = metrics.min_mean_msd(samples, truth)
    cases["msd_1_4"] = max(abs(mn - 1.0), abs(me - 2.5))
    mn, me = metrics.min_mean_msd(truth[None], truth)
    cases["msd_exact"] = abs(mn)
    labels = np.zeros((3, 1))
    labels[1, 0] = 1
    prior = act.action_prior(labels, scale=0.5, floor=0.01)
    cases["prior_bump"] = abs(prior[0, 0] - np.exp(-2.0)) + abs(prior[2, 0] - np.exp(-2.0)) + abs(prior[1, 0] - 1.0)
    worst = max(float(v) for v in cases.values())
    return _wrap({"check": "metric_units", "cases": {k: float(v) for k, v in cases.items()}, "max_abs_error": worst}, "max_abs_error", tol)


def run_all(quick=False, model=None, batch=None, episodes=None, eq9="corrected"):
    """The full verification report; ``quick`` trims trial counts for smoke runs."""
    n = 5 if quick else None
    results = [
        flow_roundtrip(n_params=n or 50),
        flow_logdet(n_params=n or 10),
        gradient_suite(n_points=n or 20),
        gumbel_density_gradient(),
        gumbel_normalization(),
        gumbel_chi2(n=100_000 if quick else 1_000_000),
        gumbel_hardening(),
        convexity_suite(model, batch, n_trials=100 if quick else 1000),
        regret_bound_check(model, episodes, eq9=eq9),
        metric_units(),
    ]
    return {"ok": all(r["ok"] for r in results), "checks": results}
