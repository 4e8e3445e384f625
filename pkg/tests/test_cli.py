from __future__ import annotations

import json

import pytest

from hybridcast import checks
from hybridcast.cli import main

SMALL = {
    "world": {"n_videos": 12},
    "n_episodes": 120,
    "train": {"epochs": 2, "pretrain_epochs": 1, "max_val": 20, "arch": checks.SMALL_ARCH},
    "eval": {"samples": 4},
    "online": {"warmup": 10},
}

TABLE_COLUMNS = (
    "H_p_qpi",
    "H_p_qkappa",
    "minMSD",
    "minMSD_std",
    "meanMSD",
    "meanMSD_std",
    "precision",
    "recall",
    "F1",
    "topk_recall",
    "n_act_tr",
    "n_act_tu",
    "traj_cosim",
    "traj_distinct",
    "act_cosim_tr",
    "act_cosim_tu",
)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(cfg), "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "1", "--data", str(root / "data/episodes.jsonl"), "--out", str(root / "train")]) == 0
    return root, cfg


def test_gen_data_deterministic(run, tmp_path):
    root, cfg = run
    assert main(["gen-data", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again/episodes.jsonl").read_bytes() == (root / "data/episodes.jsonl").read_bytes()
    a = json.loads((root / "data/manifest.json").read_text())
    b = json.loads((tmp_path / "again/manifest.json").read_text())
    assert a["content_hash"] == b["content_hash"] and a["seed"] == 1


def test_manifest_contents(run):
    root, _ = run
    m = json.loads((root / "train/manifest.json").read_text())
    assert m["status"] == "complete" and m["command"] == "train"
    assert set(m["outputs"]) >= {"model.json", "model.bin", "train_log.csv"}
    assert m["config"]["train"]["epochs"] == 2
    assert m["inputs"]["train"]["sha256"]


def test_eval_schema(run):
    root, _ = run
    args = ["eval", "--checkpoint", str(root / "train/model"), "--data", str(root / "data/episodes.jsonl"), "--samples", "5", "--out", str(root / "eval")]
    assert main(args) == 0
    rep = json.loads((root / "eval/metrics.json").read_text())
    for c in TABLE_COLUMNS:
        assert c in rep and rep[c] is not None
    assert rep["K"] == 5 and len(rep["topk_recall"]) == 10
    assert (root / "eval/metrics.csv").exists()


def test_manifest_reusable_as_config(run, tmp_path):
    root, _ = run
    assert main(["gen-data", "--config", str(root / "data/manifest.json"), "--out", str(tmp_path / "re")]) == 0
    assert (tmp_path / "re/episodes.jsonl").read_bytes() == (root / "data/episodes.jsonl").read_bytes()


def test_online_and_regret(run):
    root, _ = run
    ck, data = str(root / "train/model"), str(root / "data/episodes.jsonl")
    assert main(["online", "--checkpoint", ck, "--data", data, "--eq9", "as-printed", "--out", str(root / "online")]) == 0
    summ = json.loads((root / "online/online.json").read_text())
    assert summ["eq9"] == "as-printed"
    assert main(["regret", "--checkpoint", ck, "--data", data, "--limit", "50", "--out", str(root / "regret")]) == 0
    lines = (root / "regret/regret.csv").read_text().splitlines()
    assert lines[0].startswith("t,online_loss") and len(lines) == 51


def test_export(run):
    root, _ = run
    args = ["export", "--checkpoint", str(root / "train/model"), "--data", str(root / "data/episodes.jsonl"), "--limit", "3", "--out", str(root / "export")]
    assert main(args) == 0
    assert (root / "export/trajectories.csv").read_text().startswith("episode_id,source")
    assert (root / "export/actions.csv").exists()


def test_error_document(tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "missing"), "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "e")])
    assert rc != 0
    doc = json.loads((tmp_path / "e/error.json").read_text())
    assert doc["status"] == "failed" and doc["message"]
    assert json.loads(capsys.readouterr().err)["status"] == "failed"


def test_missing_required_flag(tmp_path):
    assert main(["train", "--out", str(tmp_path / "t")]) != 0
    assert "--data" in json.loads((tmp_path / "t/error.json").read_text())["message"]


def test_verify_quick(tmp_path):
    assert main(["verify", "--quick", "--out", str(tmp_path / "v")]) == 0
    rep = json.loads((tmp_path / "v/verify.json").read_text())
    assert rep["ok"]
    names = {c["check"] for c in rep["checks"]}
    assert {"flow_roundtrip", "regret_bound"} <= names
