from __future__ import annotations

import numpy as np
import pytest

from hybridcast import checks
from hybridcast.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, store_digest
from hybridcast.model import model_from_config


def test_round_trip(tmp_path):
    model, batch = checks.small_setup(0)
    model.store.freeze([next(iter(model.store))])
    m = save_checkpoint(tmp_path / "ck", model.store, seed=3, config={"a": 1}, meta={"model": model.config()})
    store, back = load_checkpoint(tmp_path / "ck")
    assert store_digest(store) == store_digest(model.store)
    assert back["config_hash"] == m["config_hash"] and back["seed"] == 3
    assert store.frozen == model.store.frozen
    again = model_from_config(back["meta"]["model"], store)
    a = model.traj_nll(batch).data
    np.testing.assert_array_equal(again.traj_nll(batch).data, a)


def test_suffix_is_accepted(tmp_path):
    model, _ = checks.small_setup(0)
    save_checkpoint(tmp_path / "ck", model.store)
    s1, _ = load_checkpoint(tmp_path / "ck.json")
    s2, _ = load_checkpoint(tmp_path / "ck.bin")
    assert store_digest(s1) == store_digest(s2)


def test_tamper_detected(tmp_path):
    model, _ = checks.small_setup(0)
    save_checkpoint(tmp_path / "ck", model.store)
    raw = bytearray((tmp_path / "ck.bin").read_bytes())
    raw[10] ^= 1
    (tmp_path / "ck.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
