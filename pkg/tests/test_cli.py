import csv
import json
import os

import pytest

from infomaxda import cli
from infomaxda.synthdata import gen_two_moons, rotate, save_csv
from infomaxda.trainer import METRIC_COLUMNS

FAST = "train.g_hidden = 8\ntrain.critic_hidden = 16\ntrain.latent_dim = 4\ndata.n = 200\n"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def write_config(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestConfigParsing:
    def test_values_and_comments(self):
        flat = cli.parse_config_text("train.alpha = 0.5  # weight\n\ndata.kind = 'two_moons'\ntrain.ema_rate = none\n")
        assert flat == {"train.alpha": 0.5, "data.kind": "two_moons", "train.ema_rate": None}

    def test_bad_line(self):
        with pytest.raises(cli.InputError, match="line 2"):
            cli.parse_config_text("train.alpha = 1\njunk\n")

    def test_unknown_key(self):
        with pytest.raises(cli.InputError, match="train.alfa"):
            cli.parse_config_text("train.alfa = 1\n")

    def test_overrides(self):
        assert cli.parse_overrides(["--train.alpha", "2", "--data.kind=blob_shift"]) == \
               {"train.alpha": 2, "data.kind": "blob_shift"}
        with pytest.raises(cli.InputError):
            cli.parse_overrides(["--train.alpha"])

    def test_precedence(self):
        flat = cli.resolve_config("train", {"train.alpha": 3.0, "train.beta": 0.5}, {"train.alpha": 7.0})
        assert flat["train.alpha"] == 7.0 and flat["train.beta"] == 0.5 and flat["train.gamma"] == 0.1


class TestGaussianMi:
    def test_bad_rho(self, tmp_path, capsys):
        assert cli.main(["gaussian-mi", "--rho", "1.5", "--out", str(tmp_path)]) == 2
        assert "--rho" in capsys.readouterr().err
        assert manifest(tmp_path)["exit_status"] == 2

    def test_zero_epochs(self, tmp_path):
        assert cli.main(["gaussian-mi", "--rho", "0", "--epochs", "0", "--out", str(tmp_path)]) == 0
        assert read_csv(tmp_path / "mi_curve.csv") == [["epoch", "estimate", "true_mi"]]

    def test_true_mi_column(self, tmp_path):
        code = cli.main(["gaussian-mi", "--rho", "0.9", "--n", "3000", "--epochs", "2", "--batch-size", "64",
                         "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(tmp_path / "mi_curve.csv")
        assert [r[0] for r in rows[1:]] == ["1", "2"]
        assert {round(float(r[2]), 4) for r in rows[1:]} == {0.8304}
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["estimator"] == "two_critic"

    def test_estimator_choices(self, tmp_path):
        assert cli.main(["gaussian-mi", "--estimator", "autoencoder", "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_minimal_config(self, tmp_path):
        cfg = write_config(tmp_path, "data.kind = two_moons\ntrain.max_epochs = 5\n")
        out = tmp_path / "out"
        assert cli.main(["train", cfg, "--out", str(out)]) == 0
        rows = read_csv(out / "metrics.csv")
        assert rows[0] == list(METRIC_COLUMNS)
        assert len(rows) == 6
        m = manifest(out)
        assert m["exit_status"] == 0 and m["subcommand"] == "train"
        assert set(m["artifacts"]) == {"metrics.csv", "summary.json"}
        assert m["config"]["train.max_epochs"] == 5

    def test_byte_identical_rerun_and_manifest_replay(self, tmp_path):
        cfg = write_config(tmp_path, FAST + "train.max_epochs = 3\ntrain.seed = 9\n")
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert cli.main(["train", cfg, "--out", str(a)]) == 0
        assert cli.main(["train", cfg, "--out", str(b)]) == 0
        assert cli.main(["train", str(a / "manifest.json"), "--out", str(c)]) == 0
        first = (a / "metrics.csv").read_bytes()
        assert first == (b / "metrics.csv").read_bytes() == (c / "metrics.csv").read_bytes()

    def test_command_line_override(self, tmp_path):
        cfg = write_config(tmp_path, FAST + "train.max_epochs = 3\n")
        assert cli.main(["train", cfg, "--train.max_epochs", "1", "--out", str(tmp_path / "o")]) == 0
        assert len(read_csv(tmp_path / "o" / "metrics.csv")) == 2

    def test_missing_data_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "data.kind = csv\ndata.source_path = nope.csv\ndata.target_path = t.csv\n")
        assert cli.main(["train", cfg, "--out", str(tmp_path / "o")]) == 4
        assert "nope.csv" in capsys.readouterr().err
        assert manifest(tmp_path / "o")["exit_status"] == 4

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["train", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "o")]) == 4

    def test_csv_data(self, tmp_path):
        save_csv(gen_two_moons(120, 0.1, 1), tmp_path / "s.csv")
        save_csv(rotate(gen_two_moons(120, 0.1, 2), 30).unlabeled(), tmp_path / "t.csv")
        cfg = write_config(tmp_path, FAST + "data.kind = csv\ndata.source_path = s.csv\n"
                                            "data.target_path = t.csv\ntrain.max_epochs = 2\n")
        assert cli.main(["train", cfg, "--out", str(tmp_path / "o")]) == 0
        rows = read_csv(tmp_path / "o" / "metrics.csv")
        assert rows[1][-1] == "nan"  # no target labels to score against

    def test_invalid_value(self, tmp_path):
        cfg = write_config(tmp_path, "train.lr = -1\n")
        assert cli.main(["train", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_unknown_override(self, tmp_path):
        assert cli.main(["train", "--train.bogus", "1", "--out", str(tmp_path)]) == 2

    def test_env_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("INFOMAXDA_OUT", str(tmp_path / "root"))
        cfg = write_config(tmp_path, FAST + "train.max_epochs = 1\n")
        assert cli.main(["train", cfg]) == 0
        assert (tmp_path / "root" / "train" / "metrics.csv").exists()


class TestExperiments:
    def test_ablate_table(self, tmp_path):
        cfg = write_config(tmp_path, FAST + "train.max_epochs = 1\n")
        out = tmp_path / "o"
        assert cli.main(["ablate", cfg, "--seeds", "1,2,3", "--out", str(out)]) == 0
        rows = read_csv(out / "ablation.csv")
        assert rows[0] == ["mode", "seed_1", "seed_2", "seed_3"]
        assert [r[0] for r in rows[1:]] == ["none", "k", "m", "km"]
        assert (out / "cells" / "km-seed2" / "metrics.csv").exists()

    def test_sweep_matrix_labels(self, tmp_path):
        cfg = write_config(tmp_path, FAST + "train.max_epochs = 1\n")
        out = tmp_path / "o"
        assert cli.main(["sweep", cfg, "--alphas", "0.1,10", "--betas", "0.001,1", "--out", str(out)]) == 0
        rows = read_csv(out / "matrix.csv")
        assert rows[0][1:] == ["0.001", "1.0"]
        assert [r[0] for r in rows[1:]] == ["0.1", "10.0"]
        assert all(0 <= float(v) <= 1 for r in rows[1:] for v in r[1:])

    def test_compare_arms(self, tmp_path):
        cfg = write_config(tmp_path, FAST + "train.max_epochs = 1\n")
        out = tmp_path / "o"
        assert cli.main(["compare", cfg, "--seeds", "0", "--out", str(out)]) == 0
        assert [r[0] for r in read_csv(out / "comparison.csv")[1:]] == ["two_critic", "mine_single", "autoencoder"]

    def test_cross_eval(self, tmp_path):
        cfg = write_config(tmp_path, FAST + "train.max_epochs = 3\n")
        out = tmp_path / "o"
        assert cli.main(["cross-eval", cfg, "--out", str(out)]) == 0
        assert read_csv(out / "curves.csv")[0] == ["epoch", "target_acc", "third_acc"]
        summary = json.loads((out / "summary.json").read_text())
        assert {"third_acc", "pearson_r", "reason", "target_acc"} <= set(summary)
        assert manifest(out)["config"]["data.rotation_deg"] == 30.0


class TestOracle:
    def test_all_suites(self, tmp_path, capsys):
        assert cli.main(["oracle", "--suite", "all", "--instances", "1000", "--seed", "7", "--out", str(tmp_path)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [next(iter(json.loads(line))) for line in lines] == ["elbo", "infomax", "dv"]

    def test_zero_instances(self, tmp_path):
        assert cli.main(["oracle", "--instances", "0", "--out", str(tmp_path)]) == 2

    def test_corrupted_tolerance_fails(self, tmp_path, capsys):
        code = cli.main(["oracle", "--suite", "elbo", "--instances", "10", "--tolerance", "-1", "--out", str(tmp_path)])
        assert code == 1
        report = json.loads(capsys.readouterr().out)["elbo"]
        assert report["worst_case_seed"] is not None and report["passed"] is False


class TestGradcheck:
    def test_cls(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--loss", "cls", "--out", str(tmp_path)]) == 0
        assert json.loads(capsys.readouterr().out)["max_abs_violation"] <= 1e-4

    def test_bogus(self, tmp_path):
        assert cli.main(["gradcheck", "--loss", "bogus", "--out", str(tmp_path)]) == 2
        assert manifest(tmp_path)["exit_status"] == 2

    def test_repeatable(self, tmp_path, capsys):
        cli.main(["gradcheck", "--loss", "mi", "--seed", "3", "--out", str(tmp_path)])
        first = capsys.readouterr().out
        cli.main(["gradcheck", "--loss", "mi", "--seed", "3", "--out", str(tmp_path)])
        assert capsys.readouterr().out == first


class TestAtomicWrites:
    def test_failed_replace_leaves_nothing(self, tmp_path, monkeypatch):
        run = cli.RunDir(tmp_path)

        def boom(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            run.write_csv("metrics.csv", ["a"], [[1]])
        assert list(tmp_path.iterdir()) == []

    def test_no_temp_files_after_run(self, tmp_path):
        cli.main(["gradcheck", "--loss", "ent", "--out", str(tmp_path)])
        assert sorted(p.name for p in tmp_path.iterdir()) == ["gradcheck.json", "manifest.json"]
