"""Multi-label action model with Gumbel-Softmax (Concrete) relaxation.

Every (step, class) pair is a two-way categorical: index 0 = absent,
index 1 = occurs. The policy maps the context (past feature vectors and,
in joint mode, a window of positions ending at the aligned trajectory
step) to probabilities ``u``; relaxed samples are
``a = softmax((log u + g) / tau)`` with Gumbel noise ``g``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParamStore, Tensor
from .nn import init_mlp, mlp


class BoundaryError(ValueError):
    """Relaxed sample on the simplex boundary, where the density is singular."""


@dataclass
class ActionConfig:
    n_classes: int = 12
    horizon: int = 5  # T_a
    past_len: int = 10
    n_images: int = 4
    feature_dim: int = 16
    stride: int = 5  # trajectory steps per action step
    consensus: int = 400
    traj_hidden: int = 200
    joint_hidden: int = 500
    use_traj: bool = True
    pos_offset: tuple = (0.0, 0.0, 0.0)
    pos_scale: float = 1.0
    prefix: str = "act"

    def to_dict(self):
        d = asdict(self)
        d["pos_offset"] = list(self.pos_offset)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pos_offset"] = tuple(d.get("pos_offset", (0.0, 0.0, 0.0)))
        return cls(**d)


@dataclass
class RelaxedActionSample:
    a: Tensor  # (..., C, 2)
    tau: float
    g: np.ndarray


def init_action_params(store: ParamStore, cfg: ActionConfig, rng):
    p = cfg.prefix
    init_mlp(store, f"{p}.cons", [cfg.n_images * cfg.feature_dim, cfg.consensus], rng)
    width = cfg.consensus + cfg.horizon
    if cfg.use_traj:
        init_mlp(store, f"{p}.traj", [3 * cfg.past_len + 3, cfg.traj_hidden, cfg.traj_hidden], rng)
        width += cfg.traj_hidden
    init_mlp(store, f"{p}.joint", [width, cfg.joint_hidden, 2 * cfg.n_classes], rng, last_scale=0.01)
    return store


def action_windows(cfg: ActionConfig, past, traj):
    """Position windows (N, T_a, P, 3) ending at trajectory index stride*k for step k."""
    past = np.asarray(past.data if isinstance(past, Tensor) else past)
    traj = np.asarray(traj.data if isinstance(traj, Tensor) else traj)  # gradient is cut here
    seq = np.concatenate([past[:, -cfg.past_len :], traj], axis=1)
    if seq.shape[1] < cfg.past_len + cfg.stride * cfg.horizon:
        raise ContractError("trajectory too short for the action horizon")
    idx = cfg.stride * np.arange(1, cfg.horizon + 1)[:, None] + np.arange(cfg.past_len)[None, :]
    return seq[:, idx]


def _window_features(cfg, windows):
    last = windows[:, :, -1:, :]
    rel = (windows - last).reshape(*windows.shape[:2], -1)
    absn = (last[:, :, 0] - np.asarray(cfg.pos_offset)) * cfg.pos_scale
    return np.concatenate([rel, absn], axis=-1)


def action_logits(store, cfg: ActionConfig, features, windows=None, theta_act=None):
    """Pre-softmax scores v of shape (N, T_a, C, 2)."""
    features = np.asarray(features, dtype=np.float64)
    N = features.shape[0]
    if features.shape[1:] != (cfg.n_images, cfg.feature_dim):
        raise ContractError(f"features must be (N, {cfg.n_images}, {cfg.feature_dim}), got {features.shape}")
    p = cfg.prefix
    Ta = cfg.horizon
    cons = mlp(store, f"{p}.cons", Tensor(features.reshape(N, -1)), ["relu"])  # (N, 400)
    cons = ad.reshape(cons, (N, 1, cfg.consensus)) + Tensor(np.zeros((1, Ta, 1)))
    step = Tensor(np.broadcast_to(np.eye(Ta), (N, Ta, Ta)).copy())
    parts = [cons, step]
    if cfg.use_traj:
        if windows is None:
            raise ContractError("joint action policy needs position windows")
        wf = _window_features(cfg, np.asarray(windows))
        parts.insert(1, mlp(store, f"{p}.traj", Tensor(wf), ["relu", "relu"]))
    h = ad.concat(parts, axis=-1)
    v = mlp(store, f"{p}.joint", h, ["relu", "identity"]).reshape(N, Ta, cfg.n_classes, 2)
    if theta_act is not None:
        v = v * ad.as_tensor(theta_act)
    return v


def action_policy(store, cfg, features, windows=None, theta_act=None):
    """Probabilities u (N, T_a, C, 2), each pair summing to one."""
    return ad.softmax(action_logits(store, cfg, features, windows, theta_act), axis=-1)


def gumbel_noise(rng, shape):
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def sample_actions(u, tau, g=None, rng=None):
    if tau <= 0:
        raise ContractError("temperature must be positive")
    u = ad.as_tensor(u)
    if g is None:
        g = gumbel_noise(np.random.default_rng() if rng is None else rng, u.shape)
    a = ad.softmax((ad.log(u) + g) * (1.0 / tau), axis=-1)
    return RelaxedActionSample(a, float(tau), np.asarray(g))


def harden(a):
    """Argmax one-hot of each pair (ties go to 'absent')."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    occ = (a[..., 1] > a[..., 0]).astype(float)
    return np.stack([1.0 - occ, occ], axis=-1)


def gumbel_softmax_log_density(a, u, tau):
    """log of tau * (sum_i u_i / a_i^tau)^-2 * prod_i u_i / a_i^(tau+1) for pairs.

    ``a`` is a fixed array strictly inside the simplex, ``u`` may be a Tensor.
    Returns a Tensor with the pair axis reduced.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise BoundaryError("relaxed action on the simplex boundary; relax labels first")
    u = ad.as_tensor(u)
    s = ad.tsum(u * a ** (-tau), axis=-1)
    return ad.tsum(ad.log(u), axis=-1) - 2.0 * ad.log(s) + (np.log(tau) - (tau + 1.0) * np.log(a).sum(-1))


def relax_labels(labels, label_eps=0.05):
    """Binary (..., C) occurrence labels -> relaxed pairs (..., C, 2)."""
    labels = np.asarray(labels, dtype=np.float64)
    occ = label_eps + (1.0 - 2.0 * label_eps) * labels
    return np.stack([1.0 - occ, occ], axis=-1)


def forward_ce_action(u, labels, tau=0.5, label_eps=0.05):
    """Mean over examples of -sum_{t,c} log density at relaxed ground-truth labels."""
    if label_eps <= 0:
        raise BoundaryError("labels must be relaxed (label_eps > 0)")
    ld = gumbel_softmax_log_density(relax_labels(labels, label_eps), u, tau)
    N = ld.shape[0]
    return ad.tsum(ld) * (-1.0 / N)


def action_prior(labels, scale=0.5, floor=0.01):
    """Temporal prior prob_c(t) = max over occurrences t0 of exp(-(t-t0)^2/(2 s^2)), floored.

    ``labels`` is (..., T_a, C) binary.
    """
    if floor <= 0:
        raise ContractError("prior floor must be positive")
    labels = np.asarray(labels) > 0.5
    T = labels.shape[-2]
    t = np.arange(T, dtype=np.float64)
    bump = np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * scale**2))  # (t, t0)
    # (..., t, t0, C) masked by occurrences at t0
    vals = np.where(labels[..., None, :, :], bump[..., None], 0.0)
    return np.maximum(vals.max(axis=-2), floor)


def reverse_ce_action(a, prior, floor=0.01):
    """-E sum_{t,c} [a_occ log prob + a_abs log(1 - prob + floor)], averaged over leading axis."""
    a = ad.as_tensor(a)
    prior = np.asarray(prior, dtype=np.float64)
    w = np.stack([np.log(1.0 - prior + floor), np.log(prior)], axis=-1)
    N = a.shape[0]
    return ad.tsum(a * w) * (-1.0 / N)
