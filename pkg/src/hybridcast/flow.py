"""Autoregressive affine flow over future positions.

Each step maps standard-normal noise ``z_t`` to a position

    x_t = x_{t-1} + mu_hat_t + sigma_t z_t,   sigma_t = u * (expm(softclip(S_t + S_t^T)) + eps*I)

where ``mu_hat_t`` and ``S_t`` come from a GRU that has read every earlier
position (observed context first, then the positions generated so far). The
Jacobian dx/dz is block lower-triangular with blocks ``sigma_t``, so the
density is exact: log q(x) = sum_t log N(z_t; 0, I) - log det sigma_t.

Mean displacements are produced in units of ``1 / vel_scale`` (the typical
step length). ``u = 1 / sigma_scale`` sets the unit of sigma: position units
by default (``u = 1``), or step units when normalization is fitted with
``step_units=True``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParamStore, Tensor
from .linalg import inv_expm_sym, logdet_expm_sym, softclip, sym_funm, symmetrize_sum
from .nn import gru, init_gru, init_mlp, mlp

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class FlowConfig:
    past_len: int = 10
    horizon: int = 25
    hidden: int = 100
    mlp_hidden: int = 200
    clip: float = 5.0  # softclip bound L
    eps: float = 1e-6  # minimum-precision identity added to sigma
    sigma_init: float = 0.1  # fresh-network sigma before the softclip shrink (see init_flow_params)
    vel_scale: float = 1.0  # 1 / step unit; mean displacements are modelled in units of 1/vel_scale
    sigma_scale: float = 1.0  # sigma is expressed in units of 1/sigma_scale
    pos_offset: tuple = (0.0, 0.0, 0.0)
    pos_scale: float = 1.0
    prefix: str = "traj"

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
class StepDistribution:
    mu_hat: Tensor  # (N, 3) displacement
    mu: Tensor  # (N, 3) = x_{t-1} + mu_hat
    S: Tensor  # (N, 3, 3) raw network output
    A: Tensor  # (N, 3, 3) softclip(S + S^T)
    sigma: Tensor  # (N, 3, 3) SPD


@dataclass
class Inversion:
    z: Tensor  # (N, T, 3)
    log_det: Tensor  # (N,) sum_t log det sigma_t
    log_density: Tensor  # (N,)
    mu_hat: Tensor  # (N, T, 3) before theta_mu
    vel: Tensor  # (N, T, 3) after theta_mu
    A: Tensor  # (N, T, 3, 3)
    x_prev: np.ndarray  # (N, T, 3)
    extras: dict = field(default_factory=dict)


def fit_normalization(cfg: FlowConfig, past, future, step_units=False):
    """Set input scales from training positions (arrays of shape (N, P, 3), (N, T, 3))."""
    seq = np.concatenate([past, future], axis=1)
    d = np.diff(seq, axis=1)
    cfg.vel_scale = float(1.0 / max(d.std(), 1e-6))
    cfg.sigma_scale = cfg.vel_scale if step_units else 1.0
    cfg.pos_offset = tuple(float(v) for v in seq.reshape(-1, 3).mean(axis=0))
    cfg.pos_scale = float(1.0 / max(seq.reshape(-1, 3).std(), 1e-6))
    return cfg


def init_flow_params(store: ParamStore, cfg: FlowConfig, rng):
    p = cfg.prefix
    init_gru(store, f"{p}.gru", 6, cfg.hidden, rng)
    init_mlp(store, f"{p}.mlp", [cfg.hidden, cfg.mlp_hidden, 12], rng, last_scale=0.01)
    b = store[f"{p}.mlp.1.b"].data
    # S + S^T = 2 diag(b) = 2 log(sigma_init / unit) I; the softclip then shrinks
    # it, so a fresh sigma is unit * expm(softclip(2 log(sigma_init / unit) I))
    b[[3, 7, 11]] = 0.5 * np.log(cfg.sigma_init * cfg.sigma_scale)
    return store


def _gru_input(cfg, disp, pos):
    """Tensor (N, 6) fed to the recurrent cell."""
    off = np.asarray(cfg.pos_offset)
    return ad.concat([disp * cfg.vel_scale, (pos - off) * cfg.pos_scale], axis=-1)


def _past_inputs(cfg, past):
    past = np.asarray(past, dtype=np.float64)
    if past.ndim != 3 or past.shape[2] != 3:
        raise ContractError(f"past positions must be (N, P, 3), got {past.shape}")
    P = cfg.past_len
    if past.shape[1] < P:
        # repeat the earliest observed position
        pad = np.repeat(past[:, :1], P - past.shape[1], axis=1)
        past = np.concatenate([pad, past], axis=1)
    elif past.shape[1] > P:
        past = past[:, -P:]
    disp = np.diff(past, axis=1, prepend=past[:, :1])
    return past, disp


def encode_past(store, cfg, past):
    """Hidden state after reading the observed window, plus the padded window."""
    past, disp = _past_inputs(cfg, past)
    h = Tensor(np.zeros((past.shape[0], cfg.hidden)))
    for i in range(past.shape[1]):
        h = gru(store, f"{cfg.prefix}.gru", _gru_input(cfg, Tensor(disp[:, i]), Tensor(past[:, i])), h)
    return h, past


def _head(store, cfg, h):
    out = mlp(store, f"{cfg.prefix}.mlp", h, ["relu", "identity"])
    lead = out.shape[:-1]
    mu_hat = out[..., :3] * (1.0 / cfg.vel_scale)
    S = out[..., 3:].reshape(*lead, 3, 3)
    A = softclip(symmetrize_sum(S), cfg.clip)
    return mu_hat, S, A


def sigma_from(A, eps, unit=1.0):
    return sym_funm(A, lambda w: unit * (np.exp(w) + eps), lambda w: unit * np.exp(w), "sigma")


def _apply_theta(mu_hat, theta_mu):
    if theta_mu is None:
        return mu_hat
    return ad.matmul(mu_hat, ad.swap_last(ad.as_tensor(theta_mu)))


def policy_step(store, cfg, h, x_prev):
    """Step distribution given the recurrent state and the previous position."""
    mu_hat, S, A = _head(store, cfg, h)
    mu = ad.as_tensor(x_prev) + mu_hat
    return StepDistribution(mu_hat, mu, S, A, sigma_from(A, cfg.eps, 1.0 / cfg.sigma_scale))


def simulate(store, cfg, past, z, theta_mu=None, return_steps=False):
    """Map noise ``z`` (N, T, 3) to positions (N, T, 3); differentiable in params and z."""
    z = ad.as_tensor(z)
    if z.ndim != 3 or z.shape[2] != 3:
        raise ContractError(f"z must be (N, T, 3), got {z.shape}")
    h, past = encode_past(store, cfg, past)
    if past.shape[0] != z.shape[0]:
        raise ContractError("batch size of z and past differ")
    x_prev = Tensor(past[:, -1])
    xs, steps = [], []
    for t in range(z.shape[1]):
        d = policy_step(store, cfg, h, x_prev)
        vel = _apply_theta(d.mu_hat, theta_mu)
        noise = ad.matmul(d.sigma, z[:, t].reshape(-1, 3, 1)).reshape(-1, 3)
        x = x_prev + vel + noise
        xs.append(x)
        if return_steps:
            steps.append(d)
        if t + 1 < z.shape[1]:
            h = gru(store, f"{cfg.prefix}.gru", _gru_input(cfg, x - x_prev, x), h)
        x_prev = x
    x = ad.stack(xs, axis=1)
    return (x, steps) if return_steps else x


def invert(store, cfg, past, x, theta_mu=None, need_sigma=False):
    """Recover the noise that produces ``x`` and the exact log density of ``x``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ContractError(f"x must be (N, T, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("non-finite positions")
    h, past = encode_past(store, cfg, past)
    N, T, _ = x.shape
    x_prev = np.concatenate([past[:, -1:], x[:, :-1]], axis=1)
    hs = [h]
    for t in range(T - 1):
        inp = _gru_input(cfg, Tensor(x[:, t] - x_prev[:, t]), Tensor(x[:, t]))
        h = gru(store, f"{cfg.prefix}.gru", inp, h)
        hs.append(h)
    H = ad.stack(hs, axis=1)  # (N, T, hidden)
    mu_hat, S, A = _head(store, cfg, H)
    vel = _apply_theta(mu_hat, theta_mu)
    resid = (x - x_prev) - vel
    inv = inv_expm_sym(A, cfg.eps)
    z = ad.matmul(inv, (resid * cfg.sigma_scale).reshape(N, T, 3, 1)).reshape(N, T, 3)
    log_det = ad.tsum(logdet_expm_sym(A, cfg.eps), axis=1) - 3.0 * T * float(np.log(cfg.sigma_scale))
    quad = ad.tsum(ad.tsum(z * z, axis=2), axis=1)
    log_density = quad * -0.5 - (1.5 * LOG2PI * T) - log_det
    extras = {"eps": cfg.eps, "unit": 1.0 / cfg.sigma_scale}
    if need_sigma:
        extras["sigma"] = sigma_from(A, cfg.eps, 1.0 / cfg.sigma_scale)
    return Inversion(z, log_det, log_density, mu_hat, vel, A, x_prev, extras)


def log_density(store, cfg, past, x, theta_mu=None):
    return invert(store, cfg, past, x, theta_mu).log_density


def forward_ce_traj(store, cfg, past, future, theta_mu=None):
    """Mean negative log density of the (already perturbed) futures."""
    if len(future) == 0:
        raise ContractError("empty batch")
    return ad.mean(invert(store, cfg, past, future, theta_mu).log_density) * -1.0


def prior_nll(x, target, sigma_prior):
    """-log N(x_t; target_t, sigma_prior I) summed over steps, per sample (leading dims kept)."""
    diff = x - np.asarray(target)
    sq = ad.tsum(ad.tsum(diff * diff, axis=-1), axis=-1)
    T = x.shape[-2]
    return sq * (0.5 / sigma_prior) + 1.5 * T * float(np.log(2.0 * np.pi * sigma_prior))


def sample_noise(rng, n, T):
    return rng.standard_normal((n, T, 3))


def reverse_ce_traj(store, cfg, past, target, n_samples=12, sigma_prior=0.01, rng=None, z=None, theta_mu=None):
    """Monte Carlo -E_z log p~(f(z)) with the Gaussian-tube prior around ``target``.

    Returns ``(value, samples)`` with samples of shape (N, K, T, 3) so callers
    can reuse the same draws.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    past = np.asarray(past, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    N, T = target.shape[0], target.shape[1]
    K = n_samples
    if z is None:
        rng = np.random.default_rng() if rng is None else rng
        z = sample_noise(rng, N * K, T)
    z = np.asarray(z).reshape(N * K, T, 3)
    x = simulate(store, cfg, np.repeat(past, K, axis=0), z, theta_mu)
    x = x.reshape(N, K, T, 3)
    nll = prior_nll(x, target[:, None], sigma_prior)
    return ad.mean(nll), x


def reverse_ce_traj_adj(inv: Inversion, target, sigma_prior=0.01, z=None):
    """Adjusted reverse cross entropy: true past, one step from the policy.

    With ``z`` None the expectation over z is taken in closed form,
    E|mu_t + sigma_t z - x~_t|^2 = |mu_t - x~_t|^2 + tr(sigma_t^2).
    """
    target = np.asarray(target, dtype=np.float64)
    N, T, _ = target.shape
    sigma = inv.extras.get("sigma")
    if sigma is None:
        sigma = sigma_from(inv.A, inv.extras["eps"], inv.extras["unit"])
    mu = inv.vel + inv.x_prev
    const = 1.5 * T * float(np.log(2.0 * np.pi * sigma_prior))
    if z is None:
        r = mu - target
        tr = ad.tsum(ad.tsum(sigma * sigma, axis=-1), axis=-1)  # (N, T)
        per = ad.tsum(ad.tsum(r * r, axis=-1) + tr, axis=-1)
        return ad.mean(per * (0.5 / sigma_prior) + const)
    z = np.asarray(z)
    K = z.shape[1]
    noise = ad.matmul(sigma.reshape(N, 1, T, 3, 3), Tensor(z.reshape(N, K, T, 3, 1))).reshape(N, K, T, 3)
    x = mu.reshape(N, 1, T, 3) + noise
    return ad.mean(prior_nll(x, target[:, None], sigma_prior))
