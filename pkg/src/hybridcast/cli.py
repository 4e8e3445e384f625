"""Command line entry point.

    hybridcast gen-data --out runs/data --seed 0
    hybridcast train    --data runs/data/episodes.jsonl --mode joint --out runs/joint
    hybridcast eval     --checkpoint runs/joint/model --data runs/data/episodes.jsonl --out runs/joint/eval
    hybridcast online   --checkpoint runs/joint/model --data runs/data/episodes.jsonl --stream test --out runs/online
    hybridcast regret   --checkpoint runs/joint/model --data runs/stream/episodes.jsonl --stream all --out runs/regret
    hybridcast verify   --out runs/verify
    hybridcast export   --checkpoint runs/joint/model --data runs/data/episodes.jsonl --out runs/export

Settings come from one JSON file (``--config``) with the sections ``world``,
``n_episodes``, ``split``, ``train``, ``loss``, ``online`` and ``eval``; flags
override it. A manifest written by any command is itself a valid ``--config``.
Every run writes ``manifest.json`` (resolved config, seed, output hashes). A
failure writes ``error.json`` and exits with status 2.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import checks, metrics, online
from .checkpoint import load_checkpoint, save_checkpoint, store_digest
from .kernels import BACKEND
from .model import MODES, Batch, LossConfig, model_from_config
from .training import TrainConfig, batch_train
from .world import WorldConfig, generate_dataset, load_dataset, save_dataset, select, split_dataset

MANIFEST_VERSION = 1
COMMANDS = ("gen-data", "train", "eval", "online", "regret", "verify", "export")
DESK_ARCH = {"hidden": 32, "mlp_hidden": 64, "consensus": 64, "traj_hidden": 64, "joint_hidden": 64}

DEFAULTS = {
    "world": {},
    "n_episodes": 1200,
    "split": [0.7, 0.1, 0.2],
    "train": {"lr": 1e-3, "epochs": 20, "pretrain_epochs": 5, "max_val": 100, "val_samples": 2, "mode": "joint", "arch": DESK_ARCH},
    "loss": {"n_samples": 4},
    "online": {"B": 10.0, "L": None, "lr": None, "schedule": "constant", "warmup": 50, "eq9": "corrected", "rce_weight": 1.0},
    "eval": {"samples": 12, "max_episodes": None},
}


class CliError(Exception):
    pass


# -- configuration


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "arch":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object")
    if "manifest_version" in cfg:
        cfg = cfg["config"]
    unknown = set(cfg) - set(DEFAULTS) - {"seed"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def resolve(args):
    cfg = _merge(DEFAULTS, load_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if args.mode is not None:
        cfg["train"]["mode"] = args.mode
    if args.eq9 is not None:
        cfg["online"]["eq9"] = args.eq9
    if args.temperature is not None:
        cfg["loss"]["tau"] = args.temperature
    if args.samples is not None:
        cfg["eval"]["samples"] = args.samples
    return cfg


def world_config(cfg):
    return WorldConfig.from_dict({**cfg["world"], "seed": cfg["seed"]})


def loss_config(cfg):
    try:
        return LossConfig(**cfg["loss"]).validate()
    except TypeError as e:
        raise CliError(f"bad loss section: {e}") from e


def train_config(cfg):
    try:
        return TrainConfig(**{**cfg["train"], "seed": cfg["seed"]}).validate()
    except TypeError as e:
        raise CliError(f"bad train section: {e}") from e


# -- io helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def _outputs(out):
    files = sorted(p for p in Path(out).rglob("*") if p.is_file() and p.name not in ("manifest.json", "error.json"))
    return {str(p.relative_to(out)): sha256_file(p) for p in files}


def write_manifest(out, command, cfg, args, inputs, status, extra=None):
    outs = _outputs(out)
    blob = json.dumps(outs, sort_keys=True).encode()
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "status": status,
        "seed": cfg["seed"],
        "config": cfg,
        "args": {k: v for k, v in vars(args).items() if k not in ("func",)},
        "inputs": inputs,
        "outputs": outs,
        "content_hash": hashlib.sha256(blob).hexdigest(),
        "kernel_backend": BACKEND,
    }
    if extra:
        manifest.update(extra)
    return write_json(Path(out) / "manifest.json", manifest)


def load_episodes(path, split=None, limit=None):
    path = Path(path)
    if not path.exists():
        raise CliError(f"dataset not found: {path}")
    episodes, manifest = load_dataset(path)
    if not episodes:
        raise CliError(f"dataset is empty: {path}")
    if split and split != "all":
        sp = manifest.get("split")
        if not sp:
            raise CliError(f"dataset has no split; use --split all or regenerate with gen-data")
        episodes = select(episodes, sp[split])
        if not episodes:
            raise CliError(f"split {split!r} is empty")
    if limit:
        episodes = episodes[:limit]
    return episodes, {"path": str(path), "sha256": sha256_file(path), "split": split, "n_episodes": len(episodes)}


def load_model(path):
    try:
        store, manifest = load_checkpoint(path)
    except ValueError as e:
        raise CliError(str(e)) from e
    model = model_from_config(manifest["meta"]["model"], store)
    return model, manifest


# -- commands


def cmd_gen_data(args, cfg, out):
    wc = world_config(cfg)
    wc.validate()
    episodes = generate_dataset(wc, int(cfg["n_episodes"]))
    split = split_dataset(episodes, tuple(cfg["split"]), seed=cfg["seed"])
    path = out / "episodes.jsonl"
    save_dataset(path, episodes, wc, split)
    return {}, {"n_episodes": len(episodes), "world_hash": wc.hash()}


def cmd_train(args, cfg, out):
    tc = train_config(cfg)
    lc = loss_config(cfg)
    train, tin = load_episodes(args.data, args.split or "train")
    val_split = "val" if (args.split or "train") == "train" else None
    val, vin = load_episodes(args.data, val_split) if val_split else ([], None)
    t0 = time.time()

    def progress(phase, row):
        if args.verbose:
            print(f"{phase:8s} epoch {row['epoch']:3d} total={row['total']:.4f} val={row['val_total']}", file=sys.stderr, flush=True)

    res = batch_train(train, val, tc, lc, log_path=out / "train_log.csv", progress=progress)
    meta = {"model": res.model.config(), "best_epoch": res.best_epoch, "diverged": res.diverged, "message": res.message}
    save_checkpoint(out / "model", res.model.store, cfg["seed"], cfg, meta)
    if res.diverged:
        raise CliError(f"training diverged: {res.message}; the checkpoint holds the last good parameters")
    return {"train": tin, "val": vin}, {"best_epoch": res.best_epoch, "seconds": time.time() - t0}


def cmd_eval(args, cfg, out):
    model, ck = load_model(args.checkpoint)
    before = store_digest(model.store)
    eps, din = load_episodes(args.data, args.split or "test", cfg["eval"]["max_episodes"])
    report = metrics.evaluate_model(model, eps, K=int(cfg["eval"]["samples"]), seed=cfg["seed"])
    report["mode"] = model.mode
    if store_digest(model.store) != before:
        raise CliError("evaluation changed the model parameters")
    metrics.write_report(report, out)
    return {"checkpoint": _ck_input(args.checkpoint, ck), "data": din}, {}


def _ck_input(path, ck):
    return {"path": str(path), "payload_sha256": ck["payload_sha256"], "config_hash": ck["config_hash"]}


def _online_objective(cfg):
    oc = cfg["online"]
    return online.OnlineObjective(loss_config(cfg), eq9=oc["eq9"], rce_weight=float(oc["rce_weight"]))


def _run_regret(args, cfg, out, default_stream):
    model, ck = load_model(args.checkpoint)
    before = store_digest(model.store)
    eps, din = load_episodes(args.data, args.stream or default_stream, args.limit)
    oc = cfg["online"]
    stats = online.example_stats(model, eps, loss_config(cfg).label_eps)
    records, summary, theta_star, final = online.regret_curve(
        stats, _online_objective(cfg), B=float(oc["B"]), L=oc["L"], schedule=oc["schedule"], lr=oc["lr"], warmup=int(oc["warmup"])
    )
    if store_digest(model.store) != before:
        raise CliError("online fine-tuning changed the frozen network")
    online.write_regret_csv(records, out / "regret.csv")
    summary["avg_regret_final"] = records[-1].avg_regret
    summary["theta_mu"] = final.theta_mu
    summary["theta_act"] = final.theta_act
    summary["theta_star_mu"] = theta_star.theta_mu
    summary["frozen_digest"] = before
    return {"checkpoint": _ck_input(args.checkpoint, ck), "data": din}, summary


def cmd_online(args, cfg, out):
    inputs, summary = _run_regret(args, cfg, out, "test")
    summary["online_beats_frozen"] = summary["online_traj_fce"] <= summary["frozen_traj_fce"]
    write_json(out / "online.json", summary)
    return inputs, {"online_traj_fce": summary["online_traj_fce"], "frozen_traj_fce": summary["frozen_traj_fce"]}


def cmd_regret(args, cfg, out):
    inputs, summary = _run_regret(args, cfg, out, "all")
    write_json(out / "regret_summary.json", summary)
    return inputs, {"bound_ok": summary["bound_ok"], "decay_exponent": summary["decay_exponent"]}


def cmd_verify(args, cfg, out):
    model = batch = eps = None
    inputs = {}
    if args.checkpoint:
        model, ck = load_model(args.checkpoint)
        inputs["checkpoint"] = _ck_input(args.checkpoint, ck)
        if not args.data:
            raise CliError("verify with --checkpoint also needs --data")
        eps, inputs["data"] = load_episodes(args.data, args.split or "test", 300)
        batch = Batch.from_episodes(eps[:16])
    report = checks.run_all(quick=args.quick, model=model, batch=batch, episodes=eps, eq9=cfg["online"]["eq9"])
    write_json(out / "verify.json", report)
    failed = [c["check"] for c in report["checks"] if not c["ok"]]
    if failed:
        raise CliError(f"verification failed: {failed}")
    return inputs, {"ok": True}


def cmd_export(args, cfg, out):
    """Sampled trajectories and action probabilities as flat CSV for plotting."""
    model, ck = load_model(args.checkpoint)
    eps, din = load_episodes(args.data, args.split or "test", args.limit or 20)
    b = Batch.from_episodes(eps)
    K = int(cfg["eval"]["samples"])
    x, u = model.sample(b, K, np.random.default_rng(cfg["seed"]))
    x = np.asarray(getattr(x, "data", x))
    with open(out / "trajectories.csv", "w") as fh:
        fh.write("episode_id,source,sample,t,x,y,z\n")
        for i, eid in enumerate(b.ids):
            for t, p in enumerate(b.past[i]):
                fh.write(f"{eid},past,-1,{t - len(b.past[i]) + 1},{p[0]!r},{p[1]!r},{p[2]!r}\n")
            for t, p in enumerate(b.future[i]):
                fh.write(f"{eid},truth,-1,{t + 1},{p[0]!r},{p[1]!r},{p[2]!r}\n")
            for k in range(K):
                for t, p in enumerate(x[i, k]):
                    fh.write(f"{eid},sample,{k},{t + 1},{p[0]!r},{p[1]!r},{p[2]!r}\n")
    prob = u[..., 1].mean(axis=1)
    with open(out / "actions.csv", "w") as fh:
        fh.write("episode_id,step,class,prob,label\n")
        for i, eid in enumerate(b.ids):
            for t in range(prob.shape[1]):
                for c in range(prob.shape[2]):
                    fh.write(f"{eid},{t + 1},{c},{prob[i, t, c]!r},{int(b.labels[i, t, c])}\n")
    return {"checkpoint": _ck_input(args.checkpoint, ck), "data": din}, {"n_episodes": len(eps), "K": K}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "online": cmd_online,
    "regret": cmd_regret,
    "verify": cmd_verify,
    "export": cmd_export,
}


def build_parser():
    p = argparse.ArgumentParser(prog="hybridcast", description="joint trajectory and action forecasting")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON settings file (or a previous manifest.json)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--mode", choices=MODES)
        s.add_argument("--eq9", choices=online.EQ9_VARIANTS, help="third term of the online loss")
        s.add_argument("--temperature", type=float, help="Gumbel-Softmax temperature")
        s.add_argument("--samples", type=int, help="samples per episode (K)")
        s.add_argument("--data", help="episodes.jsonl written by gen-data")
        s.add_argument("--checkpoint", help="checkpoint stem written by train")
        s.add_argument("--split", choices=("train", "val", "test", "all"))
        s.add_argument("--stream", choices=("train", "val", "test", "all"), help="split used as the online stream")
        s.add_argument("--limit", type=int, help="use at most this many episodes")
        s.add_argument("--quick", action="store_true", help="fewer trials in verify")
        s.add_argument("--verbose", action="store_true")
    return p


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise CliError(f"{args.command} needs {' '.join(missing)}")


REQUIRED = {"train": ("data",), "eval": ("checkpoint", "data"), "online": ("checkpoint", "data"), "regret": ("checkpoint", "data"), "export": ("checkpoint", "data")}


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    cfg = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        _require(args, *REQUIRED.get(args.command, ()))
        cfg = resolve(args)
        inputs, extra = HANDLERS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, args, inputs, "complete", {"result": extra})
        print(json.dumps({"status": "complete", "command": args.command, "out": str(out), **extra}, default=_json_default))
        return 0
    except Exception as e:  # every failure becomes an error document
        doc = {
            "status": "failed",
            "command": args.command,
            "error": type(e).__name__,
            "message": str(e),
            "partial_outputs": sorted(_outputs(out)) if out.exists() else [],
            "traceback": traceback.format_exc(limit=5) if not isinstance(e, CliError) else None,
        }
        try:
            write_json(out / "error.json", doc)
            if cfg is not None:
                write_manifest(out, args.command, cfg, args, {}, "partial", {"error": doc["message"]})
        except OSError:
            pass
        print(json.dumps(doc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
