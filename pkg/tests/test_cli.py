import csv
import json

import numpy as np
import pytest

from pmsmooth.cli import main, read_dataset


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run(tmp_path, *argv):
    return main(list(argv) + ["--out", str(tmp_path)])


class TestSimulate:
    def test_dataset_and_manifest(self, tmp_path):
        assert run(tmp_path, "simulate", "--preset", "linear_gaussian", "--n", "5", "--seed", "3") == 0
        rows = rows_of(tmp_path / "dataset.csv")
        assert rows[0] == ["time", "y_1", "x_1"] and len(rows) == 7
        man = json.loads((tmp_path / "dataset.manifest.json").read_text())
        assert man["seed"] == 3 and man["verb"] == "simulate" and len(man["config_sha256"]) == 64
        assert "out" not in man["config"]

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run(d, "simulate", "--preset", "sine", "--n", "4", "--seed", "9") == 0
        assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
        assert (a / "dataset.manifest.json").read_bytes() == (b / "dataset.manifest.json").read_bytes()

    def test_read_back(self, tmp_path):
        run(tmp_path, "simulate", "--preset", "rnn8", "--n", "3")
        t, y, x = read_dataset(str(tmp_path / "dataset.csv"))
        assert y.shape == (4, 4) and x.shape == (4, 8)


class TestSmooth:
    def test_results_and_summary(self, tmp_path):
        code = run(
            tmp_path, "smooth", "--preset", "linear_gaussian", "--n", "5", "--particles", "30",
            "--backward", "3", "--replicates", "3", "--method", "BackwardIS", "--method", "PathSpace",
            "--functional", "state_at", "--k-star", "2",
        )
        assert code == 0
        res = rows_of(tmp_path / "results.csv")
        assert res[0] == [
            "replicate", "method", "particles", "backward", "estimate_0", "mse",
            "wall_time_ns", "mean_ess", "mean_wald_rounds_filter", "mean_wald_rounds_backward",
        ]
        assert len(res) == 7
        summ = rows_of(tmp_path / "summary.csv")
        assert summ[0] == [
            "method", "particles", "backward", "replicates", "mean_0", "se_0", "mse", "mse_se", "median_wall_time_ns",
        ]
        assert {r[0] for r in summ[1:]} == {"BackwardIS", "PathSpace"}
        assert np.isfinite(float(res[1][5]))

    def test_dataset_input_and_all_states(self, tmp_path):
        run(tmp_path, "simulate", "--preset", "linear_gaussian", "--n", "4")
        code = run(
            tmp_path, "smooth", "--preset", "linear_gaussian", "--dataset", str(tmp_path / "dataset.csv"),
            "--particles", "20", "--backward", "2", "--functional", "all_states",
        )
        assert code == 0
        assert rows_of(tmp_path / "results.csv")[0][4:9] == [f"estimate_{i}" for i in range(5)]

    def test_yaml_config_with_flag_override(self, tmp_path):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text(
            "preset: linear_gaussian\nn: 3\nparticles: 10\nbackward: 2\nreplicates: 2\nbackward_sweep: [1, 2]\n"
        )
        assert main(["smooth", "--config", str(cfg), "--replicates", "1", "--out", str(tmp_path)]) == 0
        res = rows_of(tmp_path / "results.csv")
        assert [r[3] for r in res[1:]] == ["1", "2"]

    def test_wald_budget_is_numerical_failure(self, tmp_path, capsys):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text("overrides: {smoother: {wald_max_rounds: 1}}\n")
        code = main([
            "smooth", "--config", str(cfg), "--preset", "lotka_volterra", "--n", "20",
            "--particles", "50", "--backward", "20", "--out", str(tmp_path),
        ])
        assert code == 3
        assert "WaldBudgetExceeded" in capsys.readouterr().err


class TestErrors:
    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("particels: 10\n")
        assert main(["smooth", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_unknown_preset(self, tmp_path):
        assert run(tmp_path, "simulate", "--preset", "nope") == 2

    def test_k_star_out_of_range(self, tmp_path):
        assert run(tmp_path, "smooth", "--preset", "linear_gaussian", "--n", "3", "--k-star", "9") == 2

    def test_bad_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["smooth", "--method", "Magic"])
        assert exc.value.code == 2

    def test_missing_dataset(self, tmp_path):
        assert run(tmp_path, "smooth", "--dataset", str(tmp_path / "none.csv")) == 4

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["simulate", "--preset", "sine", "--n", "2", "--out", str(blocker / "sub")]) == 4


class TestRmlAndBench:
    def test_rml_csv(self, tmp_path):
        cfg = tmp_path / "rml.yaml"
        cfg.write_text("preset: sine_rml\nn: 6\nparticles: 10\nbackward: 2\nrml: {starts: [0.5, 1.0], kappas: [0.6, 1.0], burn_in: 2}\n")
        assert main(["rml", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        rows = rows_of(tmp_path / "rml.csv")
        assert rows[0] == [
            "run", "theta0_0", "kappa", "k", "theta_0", "polyak_0", "gamma", "score_norm", "wall_time_ns",
        ]
        assert len(rows) == 1 + 4 * 6
        assert {r[0] for r in rows[1:]} == {"0", "1", "2", "3"}

    def test_rml_needs_family(self, tmp_path):
        assert run(tmp_path, "rml", "--preset", "rnn8", "--n", "2") == 2

    def test_bench_csv(self, tmp_path):
        cfg = tmp_path / "bench.yaml"
        cfg.write_text(
            "preset: sine\nn: 2\nmethods: [BackwardIS, BackwardAR]\n"
            "overrides: {spec: {estimator_reps: 1}}\nbench: {particles: [20], repeats: 2}\n"
        )
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        rows = rows_of(tmp_path / "bench.csv")
        assert rows[0] == ["method", "particles", "backward", "repeats", "median_ns", "q25_ns", "q75_ns", "iqr_ns"]
        assert [(r[0], r[2]) for r in rows[1:]] == [("BackwardIS", "2"), ("BackwardAR", "2")]
