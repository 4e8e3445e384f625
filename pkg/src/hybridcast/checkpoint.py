"""Checkpoint files: a JSON manifest next to a raw little-endian float64 payload.

``<path>.json`` lists every parameter (name, shape, offset in values) plus
the seed, a config hash and free-form metadata; ``<path>.bin`` holds the
concatenated values.
"""
import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import ParamStore

FORMAT = "hybridcast-ckpt-1"


class CheckpointError(ValueError):
    pass


def _paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, store: ParamStore, seed=None, config=None, meta=None):
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "frozen": name in store.frozen})
        chunks.append(arr.ravel())
        offset += arr.size
    payload = (np.concatenate(chunks) if chunks else np.zeros(0, "<f8")).astype("<f8").tobytes()
    bpath.write_bytes(payload)
    manifest = {
        "format": FORMAT,
        "params": entries,
        "n_values": offset,
        "seed": seed,
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def load_checkpoint(path):
    """Return ``(store, manifest)``; raises CheckpointError on any mismatch."""
    mpath, bpath = _paths(path)
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"checkpoint not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError("unknown checkpoint format")
    payload = bpath.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError("checkpoint payload hash mismatch")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != manifest["n_values"]:
        raise CheckpointError("checkpoint payload size mismatch")
    store = ParamStore()
    frozen = []
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        store.add(e["name"], values[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy())
        if e.get("frozen"):
            frozen.append(e["name"])
    store.freeze(frozen)
    return store, manifest


def store_digest(store: ParamStore, prefix="") -> str:
    h = hashlib.sha256()
    for name in store.names(prefix):
        h.update(name.encode())
        h.update(np.ascontiguousarray(store[name].data, dtype="<f8").tobytes())
    return h.hexdigest()
