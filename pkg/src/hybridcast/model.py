"""Forecasting models sharing one interface: the hybrid flow model and two baselines.

``HybridModel``   autoregressive flow + Gumbel-Softmax action policy
``DCEModel``      open-loop per-step Gaussians + Bernoulli action heads
``MRMCModel``     deterministic displacement regression + Bernoulli action heads

Every model exposes ``losses`` (training terms), ``traj_nll``, ``action_probs``
and ``sample`` so training and evaluation code never branch on the kind.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import actions as act
from . import autodiff as ad
from . import flow
from .autodiff import ContractError, ParamStore, Tensor
from .linalg import inv_expm_sym, logdet_expm_sym, softclip, symmetrize_sum
from .nn import init_gru, init_mlp, mlp

MODES = ("joint", "separate", "forward-only", "dce", "mrmc")


@dataclass
class Batch:
    past: np.ndarray  # (N, P, 3)
    features: np.ndarray  # (N, n_images, F)
    future: np.ndarray  # (N, T, 3)
    labels: np.ndarray  # (N, T_a, C) binary
    ids: np.ndarray

    @classmethod
    def from_episodes(cls, episodes):
        if not episodes:
            raise ContractError("empty batch")
        return cls(
            np.stack([e.past_positions for e in episodes]),
            np.stack([e.past_features for e in episodes]),
            np.stack([e.future_positions for e in episodes]),
            np.stack([e.action_labels for e in episodes]),
            np.array([e.episode_id for e in episodes]),
        )

    def __len__(self):
        return len(self.past)

    def take(self, idx):
        return Batch(self.past[idx], self.features[idx], self.future[idx], self.labels[idx], self.ids[idx])

    def with_future(self, future):
        return Batch(self.past, self.features, future, self.labels, self.ids)


@dataclass
class LossConfig:
    beta_traj: float = 0.02
    beta_act: float = 0.1
    sigma_prior: float = 0.01
    prior_scale: float = 0.5
    eta: float = 1e-4
    tau: float = 0.5
    label_eps: float = 0.05
    prior_floor: float = 0.01
    n_samples: int = 12

    def validate(self):
        for k in ("sigma_prior", "prior_scale", "tau", "label_eps", "prior_floor"):
            if getattr(self, k) <= 0:
                raise ContractError(f"{k} must be positive")
        if self.beta_traj < 0 or self.beta_act < 0 or self.eta < 0:
            raise ContractError("weights and eta must be non-negative")
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")
        return self


def _repeat(x, K):
    return np.repeat(np.asarray(x), K, axis=0)


class HybridModel:
    """q(x, a | phi) = q_pi(x | phi) q_kappa(a | x, phi)."""

    kind = "flow"

    def __init__(self, flow_cfg: flow.FlowConfig, act_cfg: act.ActionConfig, store: ParamStore | None = None, rng=None, mode="joint"):
        self.mode = mode
        self.flow_cfg = flow_cfg
        self.act_cfg = act_cfg
        if store is None:
            rng = np.random.default_rng(0) if rng is None else rng
            store = ParamStore()
            flow.init_flow_params(store, flow_cfg, rng)
            act.init_action_params(store, act_cfg, rng)
        self.store = store

    @property
    def traj_prefix(self):
        return self.flow_cfg.prefix + "."

    @property
    def act_prefix(self):
        return self.act_cfg.prefix + "."

    def config(self):
        return {"kind": self.kind, "mode": self.mode, "flow": self.flow_cfg.to_dict(), "action": self.act_cfg.to_dict()}

    # -- pieces
    def action_u(self, features, past, traj, theta_act=None):
        windows = act.action_windows(self.act_cfg, past, traj) if self.act_cfg.use_traj else None
        return act.action_policy(self.store, self.act_cfg, features, windows, theta_act)

    def traj_nll(self, batch: Batch, theta_mu=None):
        """Per-episode -log q_pi(x | phi) (Tensor, shape (N,))."""
        return flow.invert(self.store, self.flow_cfg, batch.past, batch.future, theta_mu).log_density * -1.0

    def action_probs(self, batch: Batch, traj=None, theta_act=None):
        traj = batch.future if traj is None else traj
        return self.action_u(batch.features, batch.past, traj, theta_act)

    def sample_traj(self, batch: Batch, K, rng, z=None):
        N, T = len(batch), self.flow_cfg.horizon
        if z is None:
            z = flow.sample_noise(rng, N * K, T)
        x = flow.simulate(self.store, self.flow_cfg, _repeat(batch.past, K), z)
        return x.reshape(N, K, T, 3)

    def sample(self, batch: Batch, K, rng):
        """Trajectories (N, K, T, 3) and action probabilities (N, K, T_a, C, 2)."""
        traj = self.sample_traj(batch, K, rng).data
        N = len(batch)
        u = self.action_u(_repeat(batch.features, K), _repeat(batch.past, K), traj.reshape(N * K, *traj.shape[2:]))
        return traj, u.data.reshape(N, K, *u.shape[1:])

    # -- training objective
    def losses(self, batch: Batch, lc: LossConfig, rng, parts=("traj", "act")):
        """The four cross-entropy terms; the future in ``batch`` is already perturbed."""
        out = {}
        K = lc.n_samples
        N = len(batch)
        samples = None
        if "traj" in parts:
            out["H_p_qpi"] = ad.mean(self.traj_nll(batch))
            if lc.beta_traj > 0:
                rce, samples = flow.reverse_ce_traj(
                    self.store, self.flow_cfg, batch.past, batch.future, K, lc.sigma_prior, rng=rng
                )
                out["H_rev_traj"] = rce
        if "act" in parts:
            u_gt = self.action_probs(batch)
            out["H_p_qkappa"] = act.forward_ce_action(u_gt, batch.labels, lc.tau, lc.label_eps)
            if lc.beta_act > 0:
                if self.act_cfg.use_traj:
                    if samples is None:
                        samples = self.sample_traj(batch, K, rng)
                    traj = samples.data.reshape(N * K, *samples.shape[2:])
                    u = self.action_u(_repeat(batch.features, K), _repeat(batch.past, K), traj)
                else:
                    u = act.action_policy(self.store, self.act_cfg, _repeat(batch.features, K))
                relaxed = act.sample_actions(u, lc.tau, rng=rng)
                prior = act.action_prior(_repeat(batch.labels, K), lc.prior_scale, lc.prior_floor)
                out["H_rev_act"] = act.reverse_ce_action(relaxed.a, prior, lc.prior_floor)
        return out


class _BaselineBase:
    """Shared encoder plumbing for the two baselines."""

    kind = "baseline"

    def __init__(self, flow_cfg: flow.FlowConfig, act_cfg: act.ActionConfig, store=None, rng=None, mode=None):
        self.mode = self.kind
        self.flow_cfg = flow_cfg
        self.act_cfg = act_cfg
        if store is None:
            rng = np.random.default_rng(0) if rng is None else rng
            store = ParamStore()
            self._init(store, rng)
            act.init_action_params(store, act_cfg, rng)
        self.store = store

    traj_prefix = property(lambda self: self.flow_cfg.prefix + ".")
    act_prefix = property(lambda self: self.act_cfg.prefix + ".")

    def config(self):
        return {"kind": self.kind, "mode": self.mode, "flow": self.flow_cfg.to_dict(), "action": self.act_cfg.to_dict()}

    def _encode(self, past):
        h, past = flow.encode_past(self.store, self.flow_cfg, past)
        return mlp(self.store, f"{self.flow_cfg.prefix}.head", h, ["relu", "identity"]), past

    def action_u(self, features, past, traj, theta_act=None):
        windows = act.action_windows(self.act_cfg, past, traj)
        return act.action_policy(self.store, self.act_cfg, features, windows, theta_act)

    def action_probs(self, batch: Batch, traj=None, theta_act=None):
        traj = batch.future if traj is None else traj
        return self.action_u(batch.features, batch.past, traj, theta_act)

    def _bernoulli_nll(self, batch):
        u = self.action_probs(batch)
        onehot = np.stack([1.0 - batch.labels, batch.labels], axis=-1)
        return ad.tsum(ad.log(u) * onehot) * (-1.0 / len(batch))

    def sample(self, batch: Batch, K, rng):
        traj = self.sample_traj(batch, K, rng)
        N = len(batch)
        u = self.action_u(_repeat(batch.features, K), _repeat(batch.past, K), traj.reshape(N * K, *traj.shape[2:]))
        return traj, u.data.reshape(N, K, *u.shape[1:])


class DCEModel(_BaselineBase):
    """Per-step Gaussians from the encoded past; no feedback of generated positions."""

    kind = "dce"

    def _init(self, store, rng):
        cfg = self.flow_cfg
        init_gru(store, f"{cfg.prefix}.gru", 6, cfg.hidden, rng)
        init_mlp(store, f"{cfg.prefix}.head", [cfg.hidden, cfg.mlp_hidden, 12 * cfg.horizon], rng, last_scale=0.01)
        b = store[f"{cfg.prefix}.head.1.b"].data.reshape(cfg.horizon, 12)
        # spread grows like a random walk at initialization
        t = np.arange(1, cfg.horizon + 1)
        for i in (3, 7, 11):
            b[:, i] = 0.5 * np.log(cfg.sigma_init * cfg.sigma_scale * np.sqrt(t))

    def _gaussians(self, past):
        out, past = self._encode(past)
        N, T = out.shape[0], self.flow_cfg.horizon
        out = out.reshape(N, T, 12)
        steps = out[..., :3] * (1.0 / self.flow_cfg.vel_scale)
        # cumulative sum over steps via a fixed lower-triangular matrix
        tri = np.tril(np.ones((T, T)))
        mean = ad.matmul(Tensor(tri), steps) + past[:, -1:, :]
        A = softclip(symmetrize_sum(out[..., 3:].reshape(N, T, 3, 3)), self.flow_cfg.clip)
        return mean, A

    def traj_nll(self, batch: Batch, theta_mu=None):
        mean, A = self._gaussians(batch.past)
        N, T = mean.shape[0], mean.shape[1]
        r = batch.future - mean
        vs = self.flow_cfg.sigma_scale
        z = ad.matmul(inv_expm_sym(A, self.flow_cfg.eps), (r * vs).reshape(N, T, 3, 1)).reshape(N, T, 3)
        quad = ad.tsum(ad.tsum(z * z, axis=2), axis=1)
        logdet = ad.tsum(logdet_expm_sym(A, self.flow_cfg.eps), axis=1) - 3.0 * T * float(np.log(vs))
        return quad * 0.5 + 1.5 * flow.LOG2PI * T + logdet

    def sample_traj(self, batch: Batch, K, rng, z=None):
        mean, A = self._gaussians(batch.past)
        N, T = mean.shape[0], mean.shape[1]
        sigma = flow.sigma_from(A, self.flow_cfg.eps, 1.0 / self.flow_cfg.sigma_scale).data
        if z is None:
            z = rng.standard_normal((N, K, T, 3))
        return mean.data[:, None] + np.einsum("ntij,nktj->nkti", sigma, z)

    def losses(self, batch: Batch, lc: LossConfig, rng, parts=("traj", "act")):
        out = {}
        if "traj" in parts:
            out["H_p_qpi"] = ad.mean(self.traj_nll(batch))
        if "act" in parts:
            out["H_p_qkappa"] = self._bernoulli_nll(batch)
        return out


class MRMCModel(_BaselineBase):
    """Single deterministic trajectory (MSE) + per-class binary cross entropy."""

    kind = "mrmc"

    def _init(self, store, rng):
        cfg = self.flow_cfg
        init_gru(store, f"{cfg.prefix}.gru", 6, cfg.hidden, rng)
        init_mlp(store, f"{cfg.prefix}.head", [cfg.hidden, cfg.mlp_hidden, 3 * cfg.horizon], rng, last_scale=0.01)

    def predict(self, past):
        out, past = self._encode(past)
        N, T = out.shape[0], self.flow_cfg.horizon
        steps = out.reshape(N, T, 3) * (1.0 / self.flow_cfg.vel_scale)
        return ad.matmul(Tensor(np.tril(np.ones((T, T)))), steps) + past[:, -1:, :]

    def traj_nll(self, batch: Batch, theta_mu=None):
        """Squared error summed over steps (MRMC has no density)."""
        r = self.predict(batch.past) - batch.future
        return ad.tsum(ad.tsum(r * r, axis=2), axis=1)

    def sample_traj(self, batch: Batch, K, rng, z=None):
        x = self.predict(batch.past).data
        return np.repeat(x[:, None], K, axis=1)

    def losses(self, batch: Batch, lc: LossConfig, rng, parts=("traj", "act")):
        out = {}
        if "traj" in parts:
            r = self.predict(batch.past) - batch.future
            out["H_p_qpi"] = ad.mean(r * r)
        if "act" in parts:
            out["H_p_qkappa"] = self._bernoulli_nll(batch)
        return out


def build_model(mode, flow_cfg, act_cfg, rng=None, store=None):
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if mode in ("dce", "mrmc"):
        flow_cfg.prefix = mode + ".traj"
        act_cfg.prefix = mode + ".act"
        act_cfg.use_traj = True
        cls = DCEModel if mode == "dce" else MRMCModel
        return cls(flow_cfg, act_cfg, store=store, rng=rng)
    act_cfg.use_traj = mode != "separate"
    return HybridModel(flow_cfg, act_cfg, store=store, rng=rng, mode=mode)


def model_from_config(config: dict, store: ParamStore):
    kind = config["kind"]
    fc = flow.FlowConfig.from_dict(config["flow"])
    ac = act.ActionConfig.from_dict(config["action"])
    cls = {"flow": HybridModel, "dce": DCEModel, "mrmc": MRMCModel}[kind]
    return cls(fc, ac, store=store, mode=config.get("mode", "joint"))
