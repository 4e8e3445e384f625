"""Offline training: the complementary loss for the hybrid model and the baselines."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import actions as act
from . import autodiff as ad
from . import flow
from .autodiff import Adam, ContractError, NonFiniteError, backward
from .model import MODES, Batch, LossConfig, build_model

LOG_COLUMNS = ("epoch", "H_p_qpi", "H_p_qkappa", "H_rev_traj", "H_rev_act", "total", "val_total")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    pretrain_epochs: int = 10  # trajectory-only epochs before joint training
    mode: str = "joint"
    seed: int = 0
    val_samples: int = 4  # Monte Carlo draws for the validation objective
    max_val: int = 200  # validation episodes used for model selection
    clip_norm: float | None = 10.0
    arch: dict = field(default_factory=dict)  # overrides for FlowConfig / ActionConfig sizes

    def validate(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ContractError("invalid training configuration")
        return self


@dataclass
class TrainResult:
    model: object
    log: list
    best_epoch: int
    diverged: bool = False
    message: str = ""


def perturb_trajectories(future, eta, rng):
    """Add N(0, eta I) noise to future positions (training only)."""
    future = np.asarray(future, dtype=np.float64)
    if eta < 0:
        raise ContractError("eta must be non-negative")
    if eta == 0:
        return future
    return future + np.sqrt(eta) * rng.standard_normal(future.shape)


def weighted_total(parts, lc: LossConfig):
    w = {"H_p_qpi": 1.0, "H_p_qkappa": 1.0, "H_rev_traj": lc.beta_traj, "H_rev_act": lc.beta_act}
    total = None
    for k, v in parts.items():
        term = v * w[k]
        total = term if total is None else total + term
    return total


def make_configs(train: Batch, world_cfg=None, arch=None):
    """Flow/action configs with input normalization fitted on the training set."""
    arch = dict(arch or {})
    fc = flow.FlowConfig(
        past_len=train.past.shape[1],
        horizon=train.future.shape[1],
        **{k: arch[k] for k in ("hidden", "mlp_hidden", "sigma_init", "eps", "clip") if k in arch},
    )
    flow.fit_normalization(fc, train.past, train.future, step_units=bool(arch.get("step_units", False)))
    ac = act.ActionConfig(
        n_classes=train.labels.shape[2],
        horizon=train.labels.shape[1],
        past_len=train.past.shape[1],
        n_images=train.features.shape[1],
        feature_dim=train.features.shape[2],
        stride=train.future.shape[1] // train.labels.shape[1],
        pos_offset=fc.pos_offset,
        pos_scale=fc.pos_scale,
        **{k: arch[k] for k in ("consensus", "traj_hidden", "joint_hidden") if k in arch},
    )
    return fc, ac


def _phases(tc: TrainConfig, model):
    tp, ap = model.traj_prefix, model.act_prefix
    if tc.mode in ("joint", "forward-only"):
        ph = []
        if tc.pretrain_epochs:
            ph.append(("pretrain", tc.pretrain_epochs, ("traj",), tp))
        ph.append(("joint", tc.epochs, ("traj", "act"), ""))
        return ph
    if tc.mode == "separate":
        return [("traj", tc.epochs, ("traj",), tp), ("act", tc.epochs, ("act",), ap)]
    return [("all", tc.epochs, ("traj", "act"), "")]


def evaluate_objective(model, batch: Batch, lc: LossConfig, parts, seed, n_samples):
    lcv = LossConfig(**{**asdict(lc), "n_samples": n_samples})
    rng = np.random.default_rng(seed)
    vals = model.losses(batch, lcv, rng, parts)
    total = weighted_total(vals, lc)
    return {k: float(v.data) for k, v in vals.items()}, float(total.data)


def batch_train(train_eps, val_eps, tc: TrainConfig, lc: LossConfig, log_path=None, model=None, progress=None):
    """Optimize the complementary loss; returns the best-on-validation model."""
    tc.validate()
    lc = lc.validate()
    if tc.mode == "forward-only":
        lc = LossConfig(**{**asdict(lc), "beta_traj": 0.0, "beta_act": 0.0})
    if not train_eps:
        raise ContractError("empty training set")
    train = Batch.from_episodes(train_eps)
    val = Batch.from_episodes(val_eps[: tc.max_val]) if val_eps else None
    rng = np.random.default_rng(tc.seed)
    if model is None:
        fc, ac = make_configs(train, arch=tc.arch)
        model = build_model(tc.mode, fc, ac, rng=rng)
    store = model.store
    log = []
    epoch = 0
    best = (np.inf, store.state(), 0)
    diverged, message = False, ""
    phases = _phases(tc, model)
    for pi, (name, n_epochs, parts, train_prefix) in enumerate(phases):
        final_phase = pi == len(phases) - 1 or (tc.mode == "separate")
        frozen_before = set(store.frozen)
        if train_prefix:
            store.freeze([n for n in store.names() if not n.startswith(train_prefix)])
        opt = Adam(store, lr=tc.lr, clip_norm=tc.clip_norm)
        if tc.mode == "separate":
            best = (np.inf, store.state(), epoch)
        for _ in range(n_epochs):
            epoch += 1
            last_good = store.state()
            order = rng.permutation(len(train))
            sums, nb = {}, 0
            try:
                for s in range(0, len(order), tc.batch_size):
                    idx = order[s : s + tc.batch_size]
                    b = train.take(idx)
                    b = b.with_future(perturb_trajectories(b.future, lc.eta, rng))
                    store.zero_grad()
                    parts_v = model.losses(b, lc, rng, parts)
                    total = weighted_total(parts_v, lc)
                    backward(total)
                    opt.step()
                    for k, v in parts_v.items():
                        sums[k] = sums.get(k, 0.0) + float(v.data)
                    sums["total"] = sums.get("total", 0.0) + float(total.data)
                    nb += 1
                    if not np.isfinite(store.flat()).all():
                        raise NonFiniteError("parameters became non-finite")
            except (NonFiniteError, FloatingPointError) as e:
                store.load(best[1] if np.isfinite(best[0]) else last_good)
                diverged, message = True, f"diverged in epoch {epoch}: {e}"
                break
            row = {c: "" for c in LOG_COLUMNS}
            row["epoch"] = epoch
            for k, v in sums.items():
                row[k] = v / nb
            if val is not None:
                _, vt = evaluate_objective(model, val, lc, parts, tc.seed + 7777, tc.val_samples)
                row["val_total"] = vt
            else:
                vt = row["total"]
            log.append(row)
            if progress:
                progress(name, row)
            if final_phase and vt < best[0]:
                best = (vt, store.state(), epoch)
        if diverged:
            break
        if tc.mode == "separate":
            store.load(best[1])
        store.unfreeze([n for n in store.names() if n not in frozen_before])
    if not diverged and np.isfinite(best[0]):
        store.load(best[1])
    if log_path:
        write_log(log_path, log)
    return TrainResult(model, log, best[2], diverged, message)


def write_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in LOG_COLUMNS})


def train_baseline(train_eps, val_eps, kind, tc: TrainConfig, lc: LossConfig, log_path=None):
    if kind not in ("dce", "mrmc"):
        raise ContractError("baseline kind must be 'dce' or 'mrmc'")
    tc = TrainConfig(**{**asdict(tc), "mode": kind})
    return batch_train(train_eps, val_eps, tc, lc, log_path)
