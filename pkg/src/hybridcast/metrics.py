"""Evaluation metrics: sample errors, multi-label scores and sample diversity."""
from __future__ import annotations

import csv
import json
from itertools import combinations
from pathlib import Path

import numpy as np

from .autodiff import ContractError

SIM_THRESHOLD = 0.3
GUMBEL_SCALE = 0.3


def min_mean_msd(samples, truth):
    """Per-example (minMSD, meanMSD) for samples (..., K, T, 3) against truth (..., T, 3).

    The squared distance is averaged over steps and coordinates.
    """
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim < 3 or samples.shape[-2:] != truth.shape[-2:] or samples.shape[:-3] != truth.shape[:-2]:
        raise ContractError(f"shape mismatch: samples {samples.shape}, truth {truth.shape}")
    if samples.shape[-3] < 1:
        raise ContractError("need at least one sample")
    d = ((samples - truth[..., None, :, :]) ** 2).mean(axis=(-1, -2))
    return d.min(axis=-1), d.mean(axis=-1)


def _step_pr(pred, gt):
    """Precision and recall per (example, step); pred/gt are (..., C) booleans."""
    pred = np.asarray(pred) > 0.5
    gt = np.asarray(gt) > 0.5
    tp = (pred & gt).sum(-1)
    fp = (pred & ~gt).sum(-1)
    fn = (~pred & gt).sum(-1)
    empty = (tp + fp + fn) == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        r = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
    p = np.where(empty, 1.0, p)
    r = np.where(empty, 1.0, r)
    return p, r


def f1_score(p, r):
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def example_pr_f1(pred, gt):
    """Example-based precision, recall and F1 over all (example, step) cells."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError("prediction and ground truth shapes differ")
    p, r = _step_pr(pred, gt)
    P, R = float(p.mean()), float(r.mean())
    return P, R, f1_score(P, R)


def topk_recall(prob, gt, ks=range(1, 11)):
    """Recall when the K most probable classes are predicted at every step.

    ``prob`` is (..., C) occurrence probability; ties go to the lower class index.
    """
    prob, gt = np.asarray(prob, dtype=np.float64), np.asarray(gt)
    C = prob.shape[-1]
    ks = list(ks)
    if max(ks) > C or min(ks) < 1:
        raise ContractError(f"K must be in 1..{C}")
    # stable sort on -prob keeps index order among ties
    order = np.argsort(-prob, axis=-1, kind="stable")
    rank = np.argsort(order, axis=-1)
    out = []
    for k in ks:
        _, r = _step_pr(rank < k, gt)
        out.append(float(r.mean()))
    return np.array(out)


def cosine_matrix(vecs):
    """Pairwise cosine similarity; two zero vectors count as identical, zero vs non-zero as 0."""
    v = np.asarray(vecs, dtype=np.float64).reshape(len(vecs), -1)
    n = np.linalg.norm(v, axis=1)
    zero = n == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        S = (v @ v.T) / np.outer(np.where(zero, 1.0, n), np.where(zero, 1.0, n))
    S[np.ix_(zero, ~zero)] = 0.0
    S[np.ix_(~zero, zero)] = 0.0
    S[np.ix_(zero, zero)] = 1.0
    return np.clip(S, -1.0, 1.0)


def mean_pairwise(S):
    iu = np.triu_indices(len(S), 1)
    return float(S[iu].mean())


def distinct_count(S, threshold=SIM_THRESHOLD):
    """Largest subset whose pairwise similarities are all below ``threshold``.

    Exact search over subsets, so the value does not depend on sample order.
    """
    K = len(S)
    if K > 20:
        raise ContractError("distinct_count is exhaustive; use at most 20 samples")
    ok = np.asarray(S) < threshold
    compat = [sum(1 << j for j in range(K) if j != i and ok[i, j]) for i in range(K)]
    best = 1

    def grow(cand, size):
        nonlocal best
        if size > best:
            best = size
        while cand:
            if size + bin(cand).count("1") <= best:
                return
            i = cand.bit_length() - 1
            cand &= ~(1 << i)
            grow(cand & compat[i], size + 1)

    grow((1 << K) - 1, 0)
    return best


def action_diversity(hard):
    """Diversity of K hardened action samples (K, T_a, C) (binary occurs indicators)."""
    hard = np.asarray(hard) > 0.5
    K = len(hard)
    if K < 2:
        raise ContractError("diversity needs at least two samples")
    tr_sim, tu_sim = [], []
    for i, j in combinations(range(K), 2):
        # per class: TR if it occurs at the same step in both, TU if at any step in both
        tr_sim.append(int((hard[i] & hard[j]).any(axis=0).sum()))
        tu_sim.append(int((hard[i].any(axis=0) & hard[j].any(axis=0)).sum()))
    S_tr = cosine_matrix(hard.reshape(K, -1).astype(float))
    S_tu = cosine_matrix(hard.any(axis=1).astype(float))
    return {
        "n_act_tr": float(np.mean(tr_sim)),
        "n_act_tu": float(np.mean(tu_sim)),
        "act_cosim_tr": mean_pairwise(S_tr),
        "act_cosim_tu": mean_pairwise(S_tu),
        "act_distinct_tr": distinct_count(S_tr),
        "act_distinct_tu": distinct_count(S_tu),
    }


def traj_diversity(samples, origin):
    """CoSim of K trajectory samples (K, T, 3) using displacements from ``origin``."""
    samples = np.asarray(samples)
    if len(samples) < 2:
        raise ContractError("diversity needs at least two samples")
    S = cosine_matrix((samples - np.asarray(origin)).reshape(len(samples), -1))
    return {"traj_cosim": mean_pairwise(S), "traj_distinct": distinct_count(S)}


def diversity_samples(u, rng, scale=GUMBEL_SCALE):
    """Hardened action samples with Gumbel noise scaled by ``scale``: argmax(log u + scale g)."""
    from .actions import gumbel_noise

    u = np.asarray(u)
    g = gumbel_noise(rng, u.shape) * scale
    s = np.log(np.clip(u, 1e-300, None)) + g
    return (s[..., 1] > s[..., 0]).astype(float)


def diversity(traj_samples, origins, u_samples, rng):
    """Dataset means of the diversity block; inputs carry a leading example axis."""
    rows = []
    for x, o, u in zip(traj_samples, origins, u_samples):
        d = traj_diversity(x, o)
        d.update(action_diversity(diversity_samples(u, rng)))
        rows.append(d)
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def evaluate_model(model, episodes, K=12, seed=0, batch_size=64):
    """Full metrics report for a trained model on ``episodes``."""
    from . import autodiff as ad
    from .actions import forward_ce_action
    from .model import Batch

    rng = np.random.default_rng(seed)
    traj_nll, act_nll, mins, means, probs, gts, trajs, origins, us = [], [], [], [], [], [], [], [], []
    for s in range(0, len(episodes), batch_size):
        b = Batch.from_episodes(episodes[s : s + batch_size])
        traj_nll.append(model.traj_nll(b).data)
        u_gt = model.action_probs(b)
        act_nll.append(float(forward_ce_action(u_gt, b.labels).data) * len(b))
        x, u = model.sample(b, K, rng)
        x = np.asarray(x.data if isinstance(x, ad.Tensor) else x)
        mn, me = min_mean_msd(x, b.future)
        mins.append(mn)
        means.append(me)
        probs.append(u[..., 1].mean(axis=1))
        gts.append(b.labels)
        trajs.append(x)
        origins.append(b.past[:, -1])
        us.append(u)
    traj_nll = np.concatenate(traj_nll)
    mins, means = np.concatenate(mins), np.concatenate(means)
    prob, gt = np.concatenate(probs), np.concatenate(gts)
    # one prediction per sampled trajectory, scores averaged over the samples
    u_all = np.concatenate(us)[..., 1]
    scores = [example_pr_f1(u_all[:, k] > 0.5, gt)[:2] for k in range(u_all.shape[1])]
    P = float(np.mean([s[0] for s in scores]))
    R = float(np.mean([s[1] for s in scores]))
    F1 = f1_score(P, R)
    report = {
        "H_p_qpi": float(traj_nll.mean()),
        "H_p_qkappa": float(np.sum(act_nll) / len(episodes)),
        "minMSD": float(mins.mean()),
        "minMSD_std": float(mins.std()),
        "meanMSD": float(means.mean()),
        "meanMSD_std": float(means.std()),
        "precision": P,
        "recall": R,
        "F1": F1,
        "topk_recall": topk_recall(prob, gt, range(1, min(10, gt.shape[-1]) + 1)).tolist(),
        "n_episodes": len(episodes),
        "K": K,
    }
    if K >= 2:
        report.update(
            diversity(np.concatenate(trajs), np.concatenate(origins), np.concatenate(us), np.random.default_rng(seed + 1))
        )
    return report


def write_report(report, out_dir, name="metrics"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    flat = {}
    for k, v in report.items():
        if isinstance(v, list):
            for i, x in enumerate(v):
                flat[f"{k}_{i + 1}"] = x
        else:
            flat[k] = v
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(flat))
        w.writeheader()
        w.writerow(flat)
    return out_dir / f"{name}.json"
