import json
from pathlib import Path

import numpy as np
import pytest

from fewcast.cli import main
from fewcast.data import write_csv, TimeSeries


FAST = ["--meta-iterations", "5"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    assert run("generate", "--kind", "synthetic", "--seed", 11, "--out", out) == 0
    return out


class TestGenerate:
    def test_default_writes_five_csvs_and_manifest(self, tmp_path):
        out = tmp_path / "gen"
        assert run("generate", "--seed", 3, "--out", out) == 0
        csvs = sorted(p.name for p in out.glob("*.csv"))
        assert csvs == ["target.csv", "train_00.csv", "train_01.csv", "train_02.csv", "train_03.csv"]
        assert (out / "manifest.json").exists()

    def test_kind_recorded_in_manifest(self, tmp_path):
        out = tmp_path / "pv"
        assert run("generate", "--kind", "pv", "--seed", 3, "--out", out) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["kind"] == "pv"
        assert manifest["argv"][:3] == ["generate", "--kind", "pv"]

    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("generate", "--seed", 9, "--out", out) == 0
        for name in ("target.csv", "train_00.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_missing_seed_is_usage_error(self, tmp_path):
        assert run("generate", "--out", tmp_path / "x") == 2


class TestSearch:
    def test_budget_one_trajectory(self, data_dir, tmp_path):
        out = tmp_path / "s1"
        assert run("search", "--data", data_dir, "--family", "linear", "--budget", 1,
                   "--seed", 5, "--out", out, *FAST) == 0
        lines = (out / "seed_5" / "trajectory.jsonl").read_text().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert record["iteration"] == 0
        assert "wall_time_ms" not in record  # timing lives in timings.json
        assert (out / "seed_5" / "plot.csv").read_text().splitlines()[0] == "iteration,best_so_far_mse"
        assert (out / "scores.csv").exists()

    def test_missing_seed_is_usage_error(self, data_dir, tmp_path):
        assert run("search", "--data", data_dir, "--family", "linear", "--out", tmp_path / "x") == 2

    def test_zero_exit_despite_failed_evaluations(self, data_dir, tmp_path):
        # resolution 2 puts half the grid at lr = 0.5, where enough meta
        # iterations compound into a numeric blow-up
        out = tmp_path / "s2"
        assert run("search", "--data", data_dir, "--family", "linear", "--budget", 12,
                   "--seed", 1, "--out", out, "--grid-resolution", 2) == 0
        records = [json.loads(l) for l in (out / "seed_1" / "trajectory.jsonl").read_text().splitlines()]
        assert any(r["status"] == "failed" for r in records)

    def test_linear_budget_50_within_time_budget(self, data_dir, tmp_path):
        # measured well under a minute on commodity hardware; enforced at 3x
        import time

        out = tmp_path / "s50"
        start = time.perf_counter()
        assert run("search", "--data", data_dir, "--family", "linear", "--budget", 50,
                   "--seed", 3, "--out", out) == 0
        assert time.perf_counter() - start < 180.0
        assert len((out / "seed_3" / "trajectory.jsonl").read_text().splitlines()) == 50

    def test_bad_budget_usage_error(self, data_dir, tmp_path):
        assert run("search", "--data", data_dir, "--family", "linear", "--budget", 0,
                   "--seed", 1, "--out", tmp_path / "x") == 2

    def test_missing_data_dir(self, tmp_path):
        assert run("search", "--data", tmp_path / "nope", "--family", "linear",
                   "--seed", 1, "--out", tmp_path / "x") == 3


class TestTrain:
    def test_fixed_defaults_accepted_verbatim(self, data_dir, tmp_path):
        # width 512, rates 0.01 / 0.001 / 0.05, sgd
        out = tmp_path / "t1"
        assert run("train", "--data", data_dir, "--family", "mlp", "--width", 512,
                   "--inner-lr", 0.01, "--outer-lr", 0.001, "--finetune-lr", 0.05,
                   "--optimizer", "sgd", "--seed", 7, "--out", out, *FAST) == 0
        result = json.loads((out / "seed_7" / "result.json").read_text())
        assert result["config"]["inner_lr"] == 0.01
        assert result["config"]["outer_lr"] == 0.001
        assert result["config"]["finetune_lr"] == 0.05
        assert (out / "seed_7" / "model.params").exists()
        assert (out / "seed_7" / "meta_init.params").exists()

    def test_out_of_range_rate_usage_error(self, data_dir, tmp_path):
        assert run("train", "--data", data_dir, "--family", "mlp", "--inner-lr", 0.7,
                   "--seed", 1, "--out", tmp_path / "x") == 2

    def test_out_of_range_width_usage_error(self, data_dir, tmp_path):
        assert run("train", "--data", data_dir, "--family", "mlp", "--width", 64,
                   "--seed", 1, "--out", tmp_path / "x") == 2

    def test_vanilla_ignores_train_tasks(self, tmp_path):
        data = tmp_path / "only_target"
        data.mkdir()
        rng = np.random.default_rng(0)
        target = TimeSeries(task_id="solo-target", kind="synthetic", values=rng.uniform(size=60))
        write_csv([target], data / "target.csv")
        out = tmp_path / "vanilla"
        assert run("train", "--data", data, "--family", "linear", "--vanilla",
                   "--finetune-lr", 0.01, "--window", 12, "--seed", 2, "--out", out, *FAST) == 0
        result = json.loads((out / "seed_2" / "result.json").read_text())
        assert result["vanilla"] is True
        assert not (out / "seed_2" / "meta_init.params").exists()

    def test_same_seed_identical_checkpoints(self, data_dir, tmp_path):
        outs = []
        for name in ("c1", "c2"):
            out = tmp_path / name
            assert run("train", "--data", data_dir, "--family", "linear",
                       "--inner-lr", 0.001, "--outer-lr", 0.001, "--finetune-lr", 0.003,
                       "--seed", 4, "--out", out, *FAST) == 0
            outs.append((out / "seed_4" / "model.params").read_bytes())
        assert outs[0] == outs[1]


@pytest.fixture(scope="module")
def checkpoint(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert run("train", "--data", data_dir, "--family", "linear",
               "--inner-lr", 0.001, "--outer-lr", 0.001, "--finetune-lr", 0.003,
               "--seed", 6, "--out", out, *FAST) == 0
    return out / "seed_6"


class TestPredict:
    def test_row_count_default_24(self, checkpoint, data_dir, tmp_path):
        out = tmp_path / "p1"
        assert run("predict", "--checkpoint", checkpoint, "--data", data_dir, "--out", out) == 0
        lines = (out / "forecast.csv").read_text().splitlines()
        assert lines[0] == "step,y_true,y_pred"
        assert len(lines) == 1 + 24

    def test_outputs_denormalized(self, checkpoint, data_dir, tmp_path):
        from fewcast.data import load_csv

        out = tmp_path / "p2"
        assert run("predict", "--checkpoint", checkpoint, "--data", data_dir, "--out", out) == 0
        target = load_csv(data_dir / "target.csv")[0]
        rows = (out / "forecast.csv").read_text().splitlines()[1:]
        y_true = np.array([float(r.split(",")[1]) for r in rows])
        assert np.allclose(y_true, target.values[-24:], atol=1e-12)

    def test_recursive_mode_runs(self, checkpoint, data_dir, tmp_path):
        out = tmp_path / "p3"
        assert run("predict", "--checkpoint", checkpoint, "--data", data_dir, "--out", out,
                   "--recursive") == 0
        assert len((out / "forecast.csv").read_text().splitlines()) == 25

    def test_constant_zero_target_forecast_zero(self, tmp_path):
        data = tmp_path / "zero"
        data.mkdir()
        target = TimeSeries(task_id="flat-target", kind="synthetic", values=np.zeros(40))
        write_csv([target], data / "target.csv")
        train_out = tmp_path / "zero_train"
        assert run("train", "--data", data, "--family", "linear", "--vanilla",
                   "--finetune-lr", 0.01, "--window", 8, "--seed", 1, "--out", train_out, *FAST) == 0
        out = tmp_path / "zero_pred"
        assert run("predict", "--checkpoint", train_out / "seed_1", "--data", data, "--out", out) == 0
        rows = (out / "forecast.csv").read_text().splitlines()[1:]
        preds = [float(r.split(",")[2]) for r in rows]
        assert np.allclose(preds, 0.0, atol=1e-9)

    def test_corrupt_checkpoint_version_error(self, data_dir, tmp_path):
        bad = tmp_path / "bad.params"
        bad.write_bytes(b'{"format_version": 99}\n')
        assert run("predict", "--checkpoint", bad, "--data", data_dir, "--out", tmp_path / "x") == 3


class TestConfigFile:
    def test_config_supplies_values_and_seed(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"seed": 4, "tasks": 2, "hours": 80}))
        out = tmp_path / "gen"
        assert run("generate", "--config", cfg, "--out", out) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 4 and manifest["tasks"] == 2 and manifest["hours"] == 80

    def test_explicit_flag_beats_config(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"seed": 4, "tasks": 2}))
        out = tmp_path / "gen"
        assert run("generate", "--config", cfg, "--tasks", 3, "--out", out) == 0
        assert json.loads((out / "manifest.json").read_text())["tasks"] == 3

    def test_unknown_key_usage_error(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"sedd": 4}))
        assert run("generate", "--config", cfg, "--out", tmp_path / "x") == 2

    def test_search_shots_level(self, data_dir, tmp_path):
        out = tmp_path / "shots"
        assert run("search", "--data", data_dir, "--family", "linear", "--budget", 3,
                   "--seed", 2, "--out", out, "--search-shots", *FAST) == 0
        record = json.loads((out / "seed_2" / "trajectory.jsonl").read_text().splitlines()[0])
        assert len(record["config"]["choices"]) == 6
        assert record["config"]["shots"] in (1, 5, 10, 20)


class TestCompare:
    def make_scores(self, path, rows):
        path.mkdir(parents=True, exist_ok=True)
        lines = ["seed,test_mse"] + [f"{s},{m!r}" for s, m in rows]
        (path / "scores.csv").write_text("\n".join(lines) + "\n")

    def test_self_comparison_identity(self, tmp_path):
        d = tmp_path / "r1"
        self.make_scores(d, [(1, 0.5), (2, 0.4), (3, 0.3)])
        out = tmp_path / "cmp1"
        assert run("compare", d, d, "--out", out) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["pairs"]) == 1
        assert report["pairs"][0]["p_value"] == 1.0
        assert report["pairs"][0]["a12"] == 0.5

    def test_pair_count_and_percentages(self, tmp_path):
        rng = np.random.default_rng(0)
        dirs = []
        for i in range(3):
            d = tmp_path / f"m{i}"
            self.make_scores(d, [(s, float(rng.uniform(0.1, 1.0))) for s in range(10)])
            dirs.append(d)
        out = tmp_path / "cmp2"
        assert run("compare", *dirs, "--out", out) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["pairs"]) == 3  # 3 choose 2
        assert sum(report["category_percentages"].values()) == pytest.approx(100.0)

    def test_unequal_seed_sets_rejected(self, tmp_path):
        d1, d2 = tmp_path / "s1", tmp_path / "s2"
        self.make_scores(d1, [(1, 0.5), (2, 0.4)])
        self.make_scores(d2, [(1, 0.5), (3, 0.4)])
        assert run("compare", d1, d2, "--out", tmp_path / "x") == 3

    def test_single_directory_usage_error(self, tmp_path):
        d = tmp_path / "only"
        self.make_scores(d, [(1, 0.5)])
        assert run("compare", d, "--out", tmp_path / "x") == 2
