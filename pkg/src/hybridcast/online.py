"""No-regret online fine-tuning of the last linear layers.

All network weights stay frozen. Only two small transforms are learned:

``theta_mu``  (3, 3) maps the policy velocity, x_t = x_{t-1} + theta_mu mu_t + sigma_t z_t
``theta_act`` (C, 2) scales the pre-softmax action scores per class, u = softmax(theta_act * v)

Because the frozen network outputs do not depend on theta, every per-example
loss is a closed-form convex function of theta. The frozen outputs are cached
once per example (``ExampleStats``) and losses, gradients and Hessians are
evaluated in numpy. The flat parameter vector stacks vec(theta_mu) in
column-major order, so the trajectory Hessian is exactly kron(m m^T, Sigma^-1),
followed by theta_act in row-major order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import actions as act
from . import flow
from .autodiff import ContractError
from .model import Batch, HybridModel, LossConfig

EQ9_VARIANTS = ("corrected", "as-printed")
LOG2PI = float(np.log(2.0 * np.pi))
REGRET_COLUMNS = ("t", "online_loss", "hindsight_loss", "cum_regret", "avg_regret", "bound")


@dataclass
class OnlineParams:
    theta_mu: np.ndarray
    theta_act: np.ndarray
    B: float = 10.0
    L: float | None = None

    @classmethod
    def identity(cls, n_classes, B=10.0, L=None):
        return cls(np.eye(3), np.ones((n_classes, 2)), float(B), L)

    @property
    def n_classes(self):
        return self.theta_act.shape[0]

    def flat(self):
        return np.concatenate([self.theta_mu.ravel(order="F"), self.theta_act.ravel()])

    def with_flat(self, v):
        v = np.asarray(v, dtype=np.float64)
        return OnlineParams(v[:9].reshape(3, 3, order="F"), v[9:].reshape(-1, 2), self.B, self.L)

    def norm(self):
        return float(np.linalg.norm(self.flat()))


@dataclass
class RegretRecord:
    t: int
    online_loss: float
    hindsight_loss: float
    cum_regret: float
    avg_regret: float
    bound: float


def unflatten(v, n_classes):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (9 + 2 * n_classes,):
        raise ContractError(f"flat parameter vector must have length {9 + 2 * n_classes}")
    return v[:9].reshape(3, 3, order="F"), v[9:].reshape(n_classes, 2)


def project_norm_ball(theta, B):
    """Euclidean projection onto {|theta| <= B}."""
    if B <= 0:
        raise ContractError("B must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    n = np.linalg.norm(theta)
    return theta * min(1.0, B / n) if n > 0 else theta.copy()


def regret_bound(B, L, t):
    return B * L * np.sqrt(2.0 * np.asarray(t, dtype=np.float64))


# -- cached frozen-network outputs


@dataclass
class ExampleStats:
    """Frozen-model quantities for N examples; leading axis is the example."""

    m: np.ndarray  # (N, T, 3) policy velocity mu_t
    r: np.ndarray  # (N, T, 3) observed displacement x_t - x_{t-1}
    prec: np.ndarray  # (N, T, 3, 3) Sigma_t^-1 with Sigma_t = sigma_t sigma_t^T
    sig_tr: np.ndarray  # (N, T) tr(Sigma_t)
    log_det: np.ndarray  # (N,) sum_t log det sigma_t
    v: np.ndarray  # (N, T_a, C, 2) pre-softmax action scores
    log_a: np.ndarray  # (N, T_a, C, 2) log of the relaxed labels
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.m)

    @property
    def n_classes(self):
        return self.v.shape[2]

    def take(self, idx):
        idx = np.atleast_1d(idx) if np.isscalar(idx) else idx
        return ExampleStats(
            self.m[idx], self.r[idx], self.prec[idx], self.sig_tr[idx], self.log_det[idx], self.v[idx], self.log_a[idx]
        )

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("m", "r", "prec", "sig_tr", "log_det", "v", "log_a")))


def example_stats(model, episodes_or_batch, label_eps=0.05, chunk=64):
    """Run the frozen model once on the ground-truth futures and cache what the losses need."""
    if not isinstance(model, HybridModel):
        raise ContractError("online fine-tuning needs the hybrid flow model")
    batch = episodes_or_batch if isinstance(episodes_or_batch, Batch) else Batch.from_episodes(episodes_or_batch)
    parts = []
    for s in range(0, len(batch), chunk):
        b = batch.take(np.arange(s, min(s + chunk, len(batch))))
        inv = flow.invert(model.store, model.flow_cfg, b.past, b.future, need_sigma=True)
        sigma = inv.extras["sigma"].data
        cov = sigma @ np.swapaxes(sigma, -1, -2)
        windows = act.action_windows(model.act_cfg, b.past, b.future) if model.act_cfg.use_traj else None
        v = act.action_logits(model.store, model.act_cfg, b.features, windows).data
        parts.append(
            ExampleStats(
                inv.mu_hat.data,
                b.future - inv.x_prev,
                np.linalg.inv(cov),
                np.trace(cov, axis1=-2, axis2=-1),
                inv.log_det.data,
                v,
                np.log(act.relax_labels(b.labels, label_eps)),
            )
        )
    return ExampleStats.concat(parts)


def matched_stats(stats: ExampleStats, sigma_prior):
    """Copy of ``stats`` with Sigma_t = sigma_prior I (the matched-input setting)."""
    N, T = stats.m.shape[:2]
    prec = np.broadcast_to(np.eye(3) / sigma_prior, (N, T, 3, 3)).copy()
    log_det = np.full(N, 1.5 * T * np.log(sigma_prior))
    return ExampleStats(stats.m, stats.r, prec, np.full((N, T), 3.0 * sigma_prior), log_det, stats.v, stats.log_a)


# -- closed-form per-example losses (value per example, gradient of the sum)


def traj_fce(theta_mu, s: ExampleStats):
    """-log q(x) per example and the gradient of their sum w.r.t. theta_mu."""
    res = s.r - s.m @ np.asarray(theta_mu).T
    pr = np.einsum("ntij,ntj->nti", s.prec, res)
    T = s.m.shape[1]
    val = 0.5 * np.einsum("nti,nti->n", res, pr) + s.log_det + 1.5 * T * LOG2PI
    grad = -np.einsum("nti,ntj->ij", pr, s.m)
    return val, grad


def traj_rce_adj(theta_mu, s: ExampleStats, sigma_prior):
    """Adjusted reverse cross entropy: true past, the step itself drawn from the policy.

    E_z |x_{t-1} + theta mu_t + sigma_t z - x_t|^2 = |res_t|^2 + tr(Sigma_t).
    """
    res = s.r - s.m @ np.asarray(theta_mu).T
    T = s.m.shape[1]
    sq = np.einsum("nti,nti->n", res, res) + s.sig_tr.sum(axis=1)
    val = sq * (0.5 / sigma_prior) + 1.5 * T * np.log(2.0 * np.pi * sigma_prior)
    grad = -np.einsum("nti,ntj->ij", res, s.m) / sigma_prior
    return val, grad


def _lse(z):
    mx = z.max(axis=-1, keepdims=True)
    e = np.exp(z - mx)
    tot = e.sum(axis=-1, keepdims=True)
    return (mx + np.log(tot))[..., 0], e / tot


def act_fce(theta_act, s: ExampleStats, tau):
    """Gumbel-Softmax NLL of the relaxed labels with u = softmax(theta_act * v).

    Per pair it is -log tau - theta.v + 2 logsumexp(theta*v - tau log a) + (tau+1) sum log a.
    """
    tv = np.asarray(theta_act) * s.v
    lse, p = _lse(tv - tau * s.log_a)
    per = -np.log(tau) - tv.sum(-1) + 2.0 * lse + (tau + 1.0) * s.log_a.sum(-1)
    val = per.sum(axis=(1, 2))
    grad = ((2.0 * p - 1.0) * s.v).sum(axis=(0, 1))
    return val, grad


def act_fce_hessian(theta_act, s: ExampleStats, tau):
    """(C, 2, 2) blocks: sum over examples and steps of 2 diag(v)(diag p - p p^T)diag(v)."""
    _, p = _lse(np.asarray(theta_act) * s.v - tau * s.log_a)
    cov = -p[..., :, None] * p[..., None, :]
    idx = np.arange(2)
    cov[..., idx, idx] += p
    return 2.0 * np.einsum("ntci,ntcij,ntcj->cij", s.v, cov, s.v)


def traj_hessian(s: ExampleStats, kind="traj_fce", sigma_prior=0.01):
    """9x9 Hessian in column-major vec(theta_mu): sum_t kron(m m^T, Sigma^-1) (or I / sigma_prior)."""
    if kind == "traj_fce":
        return np.einsum("ntj,ntl,ntik->jilk", s.m, s.m, s.prec).reshape(9, 9)
    if kind == "traj_rce_adj":
        mm = np.einsum("ntj,ntl->jl", s.m, s.m)
        return np.kron(mm, np.eye(3)) / sigma_prior
    raise ContractError(f"unknown trajectory loss {kind!r}")


class OnlineObjective:
    """l(theta) = H(p,q_pi) + H(q_pi,p~)^adj + third term, per example.

    ``eq9='corrected'`` uses the action forward cross entropy as the third term;
    ``eq9='as-printed'`` repeats the trajectory forward cross entropy.
    """

    def __init__(self, lc: LossConfig | None = None, eq9="corrected", rce_weight=1.0):
        if eq9 not in EQ9_VARIANTS:
            raise ContractError(f"eq9 must be one of {EQ9_VARIANTS}")
        if rce_weight < 0:
            raise ContractError("rce_weight must be non-negative")
        self.lc = (lc or LossConfig()).validate()
        self.eq9 = eq9
        self.rce_weight = float(rce_weight)

    def terms(self, theta_flat, s: ExampleStats):
        """Dict of per-example term values and the flat gradient of the summed total."""
        tm, ta = unflatten(theta_flat, s.n_classes)
        f, gf = traj_fce(tm, s)
        r, gr = traj_rce_adj(tm, s, self.lc.sigma_prior)
        w = self.rce_weight
        a, ga = act_fce(ta, s, self.lc.tau)
        if self.eq9 == "corrected":
            total, g_mu, g_act = f + w * r + a, gf + w * gr, ga
        else:
            total, g_mu, g_act = 2.0 * f + w * r, 2.0 * gf + w * gr, np.zeros_like(ga)
        grad = np.concatenate([g_mu.ravel(order="F"), g_act.ravel()])
        return {"total": total, "traj_fce": f, "traj_rce_adj": r, "act_fce": a}, grad

    def __call__(self, theta_flat, s: ExampleStats):
        t, g = self.terms(theta_flat, s)
        return t["total"], g

    def hessian(self, theta_flat, s: ExampleStats):
        _, ta = unflatten(theta_flat, s.n_classes)
        C = s.n_classes
        H = np.zeros((9 + 2 * C, 9 + 2 * C))
        w = 1.0 if self.eq9 == "corrected" else 2.0
        H[:9, :9] = w * traj_hessian(s, "traj_fce") + self.rce_weight * traj_hessian(s, "traj_rce_adj", self.lc.sigma_prior)
        if self.eq9 == "corrected":
            blocks = act_fce_hessian(ta, s, self.lc.tau)
            for c in range(C):
                H[9 + 2 * c : 11 + 2 * c, 9 + 2 * c : 11 + 2 * c] = blocks[c]
        return H


# -- online gradient descent


def online_step(params: OnlineParams, stats: ExampleStats, lr, objective: OnlineObjective):
    """One projected gradient step on a single example; losses are those before the update."""
    if len(stats) != 1:
        raise ContractError("online_step takes exactly one example")
    if lr < 0:
        raise ContractError("step size must be non-negative")
    theta = params.flat()
    terms, g = objective.terms(theta, stats)
    info = {k: float(v[0]) for k, v in terms.items()}
    info["grad_norm"] = float(np.linalg.norm(g))
    if not (np.isfinite(info["total"]) and np.all(np.isfinite(g))):
        info["skipped"] = True
        return params, info
    info["skipped"] = False
    new = project_norm_ball(theta - lr * g, params.B) if lr > 0 else theta
    return params.with_flat(new), info


def estimate_lipschitz(stats: ExampleStats, objective: OnlineObjective, theta, warmup=50):
    """Largest per-example gradient norm at ``theta`` over the first ``warmup`` examples."""
    n = min(max(int(warmup), 1), len(stats))
    return max(float(np.linalg.norm(objective(theta, stats.take([i]))[1])) for i in range(n))


def hindsight_optimum(stats: ExampleStats, objective: OnlineObjective, B=10.0, theta0=None, tol=1e-6, max_iter=10000):
    """Minimizer of the summed loss over the ball |theta| <= B.

    Accelerated projected gradient with backtracking, finished by Newton steps when
    the minimizer is interior. Convergence is the norm of the projected gradient
    mapping falling below ``tol``.
    """
    if len(stats) < 1:
        raise ContractError("empty stream prefix")
    C = stats.n_classes
    theta0 = OnlineParams.identity(C).flat() if theta0 is None else project_norm_ball(theta0, B)

    def f(th):
        v, g = objective(th, stats)
        return float(v.sum()), g

    def gmap(th, g, step):
        return (th - project_norm_ball(th - step * g, B)) / step

    x = theta0.copy()
    fx, gx = f(x)
    step = 1.0 / max(np.linalg.norm(objective.hessian(x, stats), 2), 1e-12)
    y, t_acc = x.copy(), 1.0
    it, res = 0, np.inf
    for it in range(1, max_iter + 1):
        fy, gy = f(y)
        while True:
            xn = project_norm_ball(y - step * gy, B)
            fn, gn = f(xn)
            d = xn - y
            if fn <= fy + gy @ d + 0.5 / step * (d @ d) + 1e-12 * abs(fy):
                break
            step *= 0.5
        if fn > fx:  # monotone restart
            t_acc, y = 1.0, x.copy()
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc * t_acc))
        y = xn + (t_acc - 1.0) / t_new * (xn - x)
        x, fx, gx, t_acc = xn, fn, gn, t_new
        res = float(np.linalg.norm(gmap(x, gx, 1.0)))
        if res < tol:
            break
        if np.linalg.norm(x) < B * (1.0 - 1e-9) and it % 10 == 0:
            # interior: Newton steps converge quadratically
            xn, ok = _newton(f, objective, stats, x, B, tol)
            if ok:
                x = xn
                fx, gx = f(x)
                res = float(np.linalg.norm(gmap(x, gx, 1.0)))
                break
    converged = res < tol
    return x, {"converged": converged, "iterations": it, "residual": res, "loss": fx}


def _newton(f, objective, stats, x, B, tol, max_steps=30):
    fx, g = f(x)
    for _ in range(max_steps):
        H = objective.hessian(x, stats)
        # tiny ridge for directions the data never excite
        d = np.linalg.lstsq(H + 1e-12 * np.trace(H) * np.eye(len(x)), -g, rcond=None)[0]
        a = 1.0
        while a > 1e-8:
            xn = x + a * d
            fn, gn = f(xn)
            if np.linalg.norm(xn) <= B and fn <= fx + 1e-4 * a * (g @ d):
                break
            a *= 0.5
        else:
            return x, False
        x, fx, g = xn, fn, gn
        if np.linalg.norm(g) < tol:
            return x, True
    return x, False


# -- regret harness


def step_sizes(schedule, B, L, T):
    if L <= 0:
        raise ContractError("Lipschitz estimate must be positive")
    if schedule == "constant":
        return np.full(T, B / (L * np.sqrt(2.0 * T)))
    if schedule == "decay":
        return B / (L * np.sqrt(2.0 * np.arange(1, T + 1)))
    raise ContractError(f"unknown step schedule {schedule!r}")


def run_online(stats: ExampleStats, objective: OnlineObjective, params: OnlineParams, lrs):
    """Sequential pass; returns final params and per-step losses measured before each update."""
    rows = []
    for i in range(len(stats)):
        params, info = online_step(params, stats.take([i]), float(lrs[i]), objective)
        rows.append(info)
    return params, rows


def regret_curve(stats: ExampleStats, objective: OnlineObjective, B=10.0, L=None, schedule="constant", lr=None, warmup=50, hindsight_kw=None):
    """Online pass, hindsight oracle on the whole stream, and the regret records."""
    T = len(stats)
    if T < 1:
        raise ContractError("empty stream")
    p0 = OnlineParams.identity(stats.n_classes, B)
    if p0.norm() > B:
        raise ContractError("identity initialization lies outside the norm ball")
    if L is None:
        L = estimate_lipschitz(stats, objective, p0.flat(), warmup)
    p0.L = L
    lrs = np.full(T, float(lr)) if lr is not None else step_sizes(schedule, B, L, T)
    final, rows = run_online(stats, objective, p0, lrs)
    theta_star, hinfo = hindsight_optimum(stats, objective, B, **(hindsight_kw or {}))
    hind = objective(theta_star, stats)[0]
    online = np.array([r["total"] for r in rows])
    cum = np.cumsum(online - hind)
    t = np.arange(1, T + 1)
    records = [
        RegretRecord(int(i), float(o), float(h), float(c), float(c / i), float(regret_bound(B, L, i)))
        for i, o, h, c in zip(t, online, hind, cum)
    ]
    frozen = objective.terms(p0.flat(), stats)[0]
    summary = {
        "T": T,
        "B": B,
        "L": L,
        "lr_first": float(lrs[0]),
        "lr_last": float(lrs[-1]),
        "schedule": schedule if lr is None else "fixed",
        "eq9": objective.eq9,
        "hindsight": hinfo,
        "theta_star_norm": float(np.linalg.norm(theta_star)),
        "final_norm": final.norm(),
        "max_norm": max(float(np.linalg.norm(p0.flat())), final.norm()),
        "skipped": int(sum(r["skipped"] for r in rows)),
        "bound_ok": bool(np.all(cum <= regret_bound(B, L, t))),
        "decay_exponent": decay_exponent(records),
        "online_traj_fce": float(np.mean([r["traj_fce"] for r in rows])),
        "frozen_traj_fce": float(frozen["traj_fce"].mean()),
        "online_act_fce": float(np.mean([r["act_fce"] for r in rows])),
        "frozen_act_fce": float(frozen["act_fce"].mean()),
        "online_total": float(online.mean()),
        "frozen_total": float(frozen["total"].mean()),
    }
    return records, summary, OnlineParams(*unflatten(theta_star, stats.n_classes), B, L), final


def decay_exponent(records, start_frac=0.1):
    """Least-squares slope of log(average regret) against log t over the tail of the stream."""
    t = np.array([r.t for r in records], dtype=float)
    a = np.array([r.avg_regret for r in records])
    keep = (t >= start_frac * t[-1]) & (a > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(t[keep]), np.log(a[keep]), 1)[0])


def write_regret_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REGRET_COLUMNS)
        for r in records:
            w.writerow([r.t, repr(r.online_loss), repr(r.hindsight_loss), repr(r.cum_regret), repr(r.avg_regret), repr(r.bound)])
    return path


# -- convexity verification


def _fd_hessian(grad_fn, theta, h=1e-4):
    n = len(theta)
    H = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        H[:, k] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def model_grad_fn(model, batch: Batch, kind, lc: LossConfig):
    """Gradient of a single loss w.r.t. the online parameters, by autodiff through the frozen model."""
    from . import autodiff as ad

    if kind in ("traj_fce", "traj_rce_adj"):

        def g(vec):
            th = ad.Tensor(np.asarray(vec).reshape(3, 3, order="F"), requires_grad=True)
            inv = flow.invert(model.store, model.flow_cfg, batch.past, batch.future, th, need_sigma=kind != "traj_fce")
            if kind == "traj_fce":
                loss = ad.tsum(inv.log_density) * -1.0
            else:
                loss = flow.reverse_ce_traj_adj(inv, batch.future, lc.sigma_prior) * float(len(batch))
            ad.backward(loss)
            model.store.zero_grad()
            return th.grad.ravel(order="F").copy()

        return g
    if kind == "act_fce":

        def g(vec):
            th = ad.Tensor(np.asarray(vec).reshape(-1, 2), requires_grad=True)
            u = model.action_probs(batch, theta_act=th)
            loss = act.forward_ce_action(u, batch.labels, lc.tau, lc.label_eps) * float(len(batch))
            ad.backward(loss)
            model.store.zero_grad()
            return th.grad.ravel().copy()

        return g
    raise ContractError(f"unknown loss kind {kind!r}")


def _single_loss(kind, s, lc):
    if kind == "traj_fce":
        return lambda v: float(traj_fce(v.reshape(3, 3, order="F"), s)[0].sum())
    if kind == "traj_rce_adj":
        return lambda v: float(traj_rce_adj(v.reshape(3, 3, order="F"), s, lc.sigma_prior)[0].sum())
    return lambda v: float(act_fce(v.reshape(-1, 2), s, lc.tau)[0].sum())


def verify_convexity(kind, model, batch: Batch, lc: LossConfig | None = None, n_trials=1000, rng=None, radius=1.0, h=1e-4):
    """Hessian match, PSD and chord checks for one online loss on ``batch``.

    The reference Hessian is the closed form; the finite-difference Hessian comes
    from autodiff gradients through the frozen model.
    """
    lc = (lc or LossConfig()).validate()
    if kind not in ("traj_fce", "traj_rce_adj", "act_fce"):
        raise ContractError(f"unknown loss kind {kind!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    s = example_stats(model, batch, lc.label_eps)
    if kind == "act_fce":
        center = np.ones(2 * s.n_classes)
    else:
        center = np.eye(3).ravel(order="F")
    theta = center + radius * 0.3 * rng.standard_normal(center.shape)
    if kind == "act_fce":
        H_cf = np.zeros((2 * s.n_classes,) * 2)
        for c, blk in enumerate(act_fce_hessian(theta.reshape(-1, 2), s, lc.tau)):
            H_cf[2 * c : 2 * c + 2, 2 * c : 2 * c + 2] = blk
    else:
        H_cf = traj_hessian(s, kind, lc.sigma_prior)
    H_fd = _fd_hessian(model_grad_fn(model, batch, kind, lc), theta, h)
    scale = max(1.0, float(np.abs(H_cf).max()))
    hess_err = float(np.abs(H_fd - H_cf).max() / scale)
    eig_min = float(np.linalg.eigvalsh(H_cf).min())
    f = _single_loss(kind, s, lc)
    worst, worst_pt = -np.inf, None
    for _ in range(n_trials):
        a = center + radius * rng.standard_normal(center.shape)
        b = center + radius * rng.standard_normal(center.shape)
        lam = rng.uniform()
        gap = f(lam * a + (1 - lam) * b) - (lam * f(a) + (1 - lam) * f(b))
        if gap > worst:
            worst, worst_pt = gap, (a, b, lam)
    report = {
        "kind": kind,
        "hessian_rel_error": hess_err,
        "min_eigenvalue": eig_min,
        "min_eigenvalue_fd": float(np.linalg.eigvalsh(H_fd).min()),
        "max_chord_gap": float(worst),
        "n_trials": n_trials,
        "hessian_ok": hess_err < 1e-4,
        "psd_ok": eig_min >= -1e-8,
        "chord_ok": worst <= 1e-8,
    }
    report["ok"] = report["hessian_ok"] and report["psd_ok"] and report["chord_ok"]
    if not report["chord_ok"]:
        a, b, lam = worst_pt
        report["offending"] = {"a": a.tolist(), "b": b.tolist(), "lambda": lam}
    return report
