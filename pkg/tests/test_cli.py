from __future__ import annotations

import csv
import json

import pytest

from occlift.cli import build_parser, main
from occlift.config import ExperimentConfig, TrainConfig

TOY = ExperimentConfig(T=5, t_p=2, strides=(1, 2), lnet_hidden=16, gcn_hidden=(4, 4), gcn_out=8,
                       n_masks=4, train=TrainConfig(warmup_iters=10, total_iters=20, batch_size=2,
                                                    warmup_batch_size=8))


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def last_error(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--frames", "30", "--sequences", "3", "--test-sequences", "1",
                 "--labeled-fraction", "0.3", "--seed", "3", "--out", str(d / "ds.json")]) == 0
    (d / "toy.json").write_text(json.dumps(TOY.to_dict()))
    return d


class TestSynthAndStats:
    def test_synth_manifest(self, workspace):
        man = json.loads((workspace / "ds.json.manifest.json").read_text())
        assert man["command"] == "synth" and man["seed"] == 3
        assert man["argv"][-2:] == ["--seed", "3"]
        assert man["outputs"]["dataset"].endswith("ds.json")

    def test_stats_recount(self, capsys, workspace):
        code, out, _ = run(capsys, "stats", "--dataset", workspace / "ds.json")
        stats = json.loads(out)
        doc = json.loads((workspace / "ds.json").read_text())
        hidden = sum(row.count(0) for s in doc["sequences"] for v in s["views"]
                     for row in v["visibility"])
        assert code == 0 and stats["occluded_observations"] == hidden and stats["n_test"] == 1

    def test_missing_dataset_exit_3(self, capsys, tmp_path):
        code, _, err = run(capsys, "stats", "--dataset", tmp_path / "nope.json")
        assert code == 3 and last_error(err)["exit_code"] == 3

    def test_malformed_dataset_exit_3(self, capsys, tmp_path):
        (tmp_path / "bad.json").write_text("{ not json")
        code, _, err = run(capsys, "stats", "--dataset", tmp_path / "bad.json")
        assert code == 3 and "line 1" in last_error(err)["message"]


class TestMasks:
    def test_published_beta(self, capsys):
        code, out, _ = run(capsys, "masks", "--n-nodes", 527, "--alpha", 1.8)
        assert code == 0 and json.loads(out)["beta"] == 292

    def test_sportcenter_beta(self, capsys):
        code, out, _ = run(capsys, "masks", "--n-nodes", 403, "--n-joints", 13, "--alpha", 1.8)
        assert code == 0 and json.loads(out)["beta"] == 223

    def test_alpha_below_one(self, capsys):
        code, _, err = run(capsys, "masks", "--alpha", 0.5)
        assert code == 2 and last_error(err)["error"] == "config"

    def test_outputs_and_replay(self, capsys, tmp_path):
        assert run(capsys, "masks", "--n-masks", 4, "--seed", 9, "--out", tmp_path / "m.json")[0] == 0
        assert (tmp_path / "m.stats.csv").exists()
        code, _, _ = run(capsys, "replay", "--manifest", tmp_path / "m.json.manifest.json",
                         "--out", tmp_path / "m2.json")
        assert code == 0
        assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run"
    assert main(["train", "--config", str(workspace / "toy.json"), "--dataset",
                 str(workspace / "ds.json"), "--out", str(out), "--seed", "5"]) == 0
    return out


class TestTrainEval:
    def test_train_outputs(self, trained):
        assert (trained / "checkpoint.json").exists()
        rows = list(csv.DictReader(open(trained / "loss_curve.csv")))
        assert len(rows) == 20 and rows[0]["phase"] == "warmup" and rows[-1]["phase"] == "joint"
        man = json.loads((trained / "run_manifest.json").read_text())
        assert man["seed"] == 5 and set(man["inputs"]) == {"dataset", "config"}

    def test_eval_report(self, capsys, workspace, trained):
        code, out, _ = run(capsys, "eval", "--checkpoint", trained / "checkpoint.json",
                           "--dataset", workspace / "ds.json", "--out", workspace / "rep.json")
        doc = json.loads(out)
        heads = {r["eval_head"] for r in doc["reports"] if r.get("partition") in (None, "all")}
        assert code == 0 and heads == {"lnet", "rnet"}
        for r in doc["reports"]:
            assert 0 <= r["pck3d"] <= 1 and r["mpjpe"] >= 0
        assert json.loads((workspace / "rep.json").read_text()) == doc

    def test_replay_bit_identical(self, capsys, workspace, trained):
        code, _, _ = run(capsys, "replay", "--manifest", trained / "run_manifest.json",
                         "--out", workspace / "run2")
        assert code == 0
        for name in ("checkpoint.json", "loss_curve.csv"):
            assert (trained / name).read_bytes() == (workspace / "run2" / name).read_bytes()

    def test_replay_detects_changed_input(self, capsys, workspace, trained, tmp_path):
        man = json.loads((trained / "run_manifest.json").read_text())
        man["inputs"]["dataset"]["sha256"] = "0" * 64
        (tmp_path / "m.json").write_text(json.dumps(man))
        code, _, err = run(capsys, "replay", "--manifest", tmp_path / "m.json")
        assert code == 2 and "changed" in last_error(err)["message"]

    def test_stride_equal_to_window_exit_2(self, capsys, workspace, tmp_path):
        doc = ExperimentConfig().to_dict()
        doc["strides"] = [1, 31]
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        code, _, err = run(capsys, "train", "--config", tmp_path / "bad.json", "--dataset",
                           workspace / "ds.json", "--out", tmp_path / "o")
        assert code == 2 and "stride 31" in last_error(err)["message"]

    def test_unknown_config_key_exit_2(self, capsys, workspace, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"T": 5, "bogus": 1}))
        code, _, _ = run(capsys, "train", "--config", tmp_path / "bad.json", "--dataset",
                         workspace / "ds.json", "--out", tmp_path / "o")
        assert code == 2


class TestSeedPrecedence:
    def test_env_then_flag(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("OCCLIFT_SEED", "11")
        run(capsys, "masks", "--n-masks", 2, "--out", tmp_path / "a.json")
        assert json.loads((tmp_path / "a.json.manifest.json").read_text())["seed"] == 11
        run(capsys, "masks", "--n-masks", 2, "--seed", 12, "--out", tmp_path / "b.json")
        assert json.loads((tmp_path / "b.json.manifest.json").read_text())["seed"] == 12

    def test_bad_env(self, capsys, monkeypatch):
        monkeypatch.setenv("OCCLIFT_SEED", "abc")
        code, _, err = run(capsys, "masks", "--n-masks", 2)
        assert code == 2 and "OCCLIFT_SEED" in last_error(err)["message"]


def test_triangulate(capsys, workspace):
    code, out, _ = run(capsys, "triangulate", "--dataset", workspace / "ds.json", "--sequence",
                       "seq000", "--out", workspace / "tri.csv")
    summary = json.loads(out)
    assert code == 0 and summary["joints"] == 30 * 17 and summary["mean_error_mm"] < 50
    assert (workspace / "tri.csv.manifest.json").exists()


def test_ablate_csv(capsys, workspace):
    code, out, _ = run(capsys, "ablate", "--param", "dropout_mode", "--values", "none",
                       "uniform:0.2", "--seeds", 0, "--config", workspace / "toy.json",
                       "--dataset", workspace / "ds.json", "--out", workspace / "abl.csv")
    rows = list(csv.DictReader(open(workspace / "abl.csv")))
    assert code == 0 and json.loads(out)["rows"] == len(rows)
    assert list(rows[0]) == ["param", "value", "seed", "mpjpe", "nmpjpe", "pmpjpe", "pck3d",
                             "eval_head", "wall_seconds"]
    assert {r["value"] for r in rows} == {"none", "uniform:0.2"}


def test_unknown_flag_rejected(capsys):
    assert run(capsys, "stats", "--dataset", "x", "--bogus")[0] == 2


def test_help_lists_every_flag():
    parser = build_parser()
    subs = next(a for a in parser._actions if a.dest == "command").choices
    for name, sp in subs.items():
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
