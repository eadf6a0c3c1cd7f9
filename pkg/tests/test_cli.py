import csv
import json

import pytest

from radseg import cli
from radseg import harness as H


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


@pytest.fixture()
def tiny_json(tmp_path):
    cfg = H.tiny_config(in_channels=3)
    cfg.data.n_train, cfg.data.n_val = 2, 2
    cfg.batch_size, cfg.epochs = 2, 1
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return path


class TestCli:
    def test_train_then_eval(self, capsys, tmp_path, tiny_json):
        code, doc = _run(capsys, "train", "--config", tiny_json, "--out", tmp_path / "run")
        assert code == 0 and doc["ok"] and doc["command"] == "train"
        for name in ("checkpoint.zip", "config.json", "train_log.json"):
            assert (tmp_path / "run" / name).exists()
        code, doc = _run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoint.zip",
                         "--out", tmp_path / "ev")
        assert code == 0 and 0 <= doc["miou"] <= 1
        rows = list(csv.DictReader(open(tmp_path / "ev" / "eval.csv")))
        assert rows[-1]["image"] == "aggregate" and len(rows) == 3

    def test_train_twice_identical(self, capsys, tmp_path, tiny_json):
        for d in ("a", "b"):
            assert _run(capsys, "train", "--config", tiny_json, "--out", tmp_path / d)[0] == 0
        for name in ("checkpoint.zip", "train_log.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_overrides(self, tiny_json):
        args = cli.build_parser().parse_args(
            ["train", "--config", str(tiny_json), "--seed", "5", "--capr-k", "9", "--bbl-off",
             "--gltr-off", "--biou-band", "2", "--epochs", "3"])
        cfg = cli.resolve_config(args)
        assert (cfg.seed, cfg.data.scene.seed, cfg.capr.k, cfg.epochs) == (5, 5, 9, 3)
        assert cfg.metrics.biou_band == 2
        assert not cfg.ablation.bbl and not cfg.ablation.gltr
        assert cfg.ablation.rad and cfg.ablation.capr

    def test_eval_on_directory(self, capsys, tmp_path, tiny_json):
        _run(capsys, "train", "--config", tiny_json, "--epochs", "0", "--out", tmp_path / "run")
        code, doc = _run(capsys, "synth-data", "--config", tiny_json, "--count", "2",
                         "--out", tmp_path / "data")
        assert code == 0 and doc["count"] == 2
        assert json.loads((tmp_path / "data" / "manifest.json").read_text())["samples"]
        code, doc = _run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoint.zip",
                         "--images", tmp_path / "data" / "images", "--masks",
                         tmp_path / "data" / "masks", "--dataset", "synthetic",
                         "--out", tmp_path / "ev")
        assert code == 0 and doc["ok"]

    def test_gradcheck(self, capsys):
        code, doc = _run(capsys, "gradcheck", "--per-group", "1")
        assert code == 0 and doc["passed"] and doc["failed"] == []

    def test_gradcheck_failure_exit(self, capsys):
        code, doc = _run(capsys, "gradcheck", "--per-group", "1", "--tol", "0")
        assert code == 1 and not doc["ok"]
        assert doc["error"] == "GradcheckFailed" and doc["report"]["failed"]

    def test_missing_checkpoint(self, capsys, tmp_path):
        code, doc = _run(capsys, "eval", "--checkpoint", tmp_path / "nope.zip")
        assert code == 1 and doc == {"ok": False, "command": "eval", "error": "FileNotFoundError",
                                     "message": doc["message"]}

    def test_unknown_config_key(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"epochz": 3}))
        code, doc = _run(capsys, "train", "--config", bad, "--out", tmp_path)
        assert code == 1 and doc["error"] == "ConfigError" and "epochz" in doc["message"]

    def test_images_without_masks(self, capsys, tmp_path, tiny_json):
        _run(capsys, "train", "--config", tiny_json, "--epochs", "0", "--out", tmp_path / "run")
        code, doc = _run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoint.zip",
                         "--images", tmp_path)
        assert code == 1 and "--masks" in doc["message"]

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_nan_reports_step(self, capsys, tmp_path, tiny_json):
        cfg = json.loads(tiny_json.read_text())
        cfg["optimizer"]["lr"] = 1e300
        cfg["epochs"] = 3
        tiny_json.write_text(json.dumps(cfg))
        code, doc = _run(capsys, "train", "--config", tiny_json, "--out", tmp_path)
        assert code == 1 and doc["error"] == "TrainingError"
        assert doc["step"] >= 1 and "epoch" in doc

    def test_bad_usage_exits_nonzero(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["frobnicate"])
        assert info.value.code != 0
