"""Tests for the command-line interface: subcommands, exit codes, output."""

import json

import pytest

from hessopt import cli, optim
from hessopt.cli import main


class TestRunCommand:
    def test_successful_run_exits_zero_and_writes_files(self, tmp_path, capsys):
        code = main([
            "run", "--problem", "fig1-quadratic", "--optimizer", "adahessian",
            "--lr", "1.0", "--eps", "0", "--iters", "1",
            "--out", str(tmp_path), "--run-name", "one", "--no-cost-ratio",
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert "final_loss: 0.0" in out
        assert (tmp_path / "one.trajectory.jsonl").exists()
        assert (tmp_path / "one.summary.json").exists()

    def test_flags_override_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "problem": "fig1-quadratic", "optimizer": "sgd", "lr": 0.01,
            "iters": 3, "out": str(tmp_path), "cost_ratio": False,
        }))
        code = main(["run", "--config", str(cfg), "--iters", "5",
                     "--run-name", "override"])
        assert code == 0
        assert "iterations_run: 5" in capsys.readouterr().out

    def test_unknown_problem_exits_one(self, tmp_path, capsys):
        code = main(["run", "--problem", "rosenbrock", "--out", str(tmp_path)])
        assert code == 1
        assert "config error" in capsys.readouterr().err

    def test_bad_config_file_exits_one(self, tmp_path, capsys):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{oops")
        assert main(["run", "--config", str(cfg)]) == 1

    def test_bad_problem_params_json_exits_one(self, tmp_path):
        code = main(["run", "--problem-params", "[1,2]", "--out", str(tmp_path)])
        assert code == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exits_two(self, tmp_path, capsys):
        code = main([
            "run", "--problem", "fig1-quadratic", "--optimizer", "sgd",
            "--lr", "1e18", "--iters", "50", "--out", str(tmp_path),
            "--no-cost-ratio",
        ])
        assert code == 2
        assert "status: numeric_failure" in capsys.readouterr().out

    def test_no_hessian_ema_flag_reaches_optimizer(self, tmp_path, capsys):
        code = main([
            "run", "--problem", "noisy-parabola", "--optimizer", "adahessian",
            "--lr", "0.1", "--iters", "2", "--no-hessian-ema",
            "--out", str(tmp_path), "--run-name", "ablation", "--no-cost-ratio",
        ])
        assert code == 0
        header = json.loads(
            (tmp_path / "ablation.trajectory.jsonl").read_text().splitlines()[0]
        )
        assert header["config"]["hessian_ema"] is False

    def test_problem_params_forwarded_to_builder(self, tmp_path, capsys):
        code = main([
            "run", "--problem", "spd-quadratic",
            "--problem-params", '{"d": 4, "condition_number": 3.0}',
            "--optimizer", "sgd", "--lr", "0.01", "--iters", "2",
            "--out", str(tmp_path), "--no-cost-ratio",
        ])
        assert code == 0


class TestSweepCommand:
    def test_grid_sweep_prints_table_and_writes_csv(self, tmp_path, capsys):
        code = main([
            "sweep", "--problem", "fig1-quadratic", "--optimizer", "sgd",
            "--iters", "5", "--grid", "lr=0.01,0.05", "--seeds", "0,1",
            "--out", str(tmp_path), "--no-cost-ratio",
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert "final_loss_mean" in out
        assert (tmp_path / "sweep.csv").exists()

    def test_grid_values_are_typed(self):
        assert cli._parse_grid_value("0.5") == 0.5
        assert cli._parse_grid_value("3") == 3
        assert isinstance(cli._parse_grid_value("3"), int)
        assert cli._parse_grid_value("true") is True
        assert cli._parse_grid_value("step_decay") == "step_decay"

    def test_missing_grid_exits_one(self, tmp_path):
        assert main(["sweep", "--out", str(tmp_path)]) == 1

    def test_malformed_grid_exits_one(self, tmp_path):
        assert main(["sweep", "--grid", "lr:0.1", "--out", str(tmp_path)]) == 1

    def test_malformed_seeds_exit_one(self, tmp_path):
        code = main(["sweep", "--grid", "lr=0.1", "--seeds", "a,b",
                     "--out", str(tmp_path)])
        assert code == 1


class TestVerifyCommand:
    def test_subset_passes_and_writes_report(self, tmp_path, capsys):
        code = main(["verify", "--properties", "rademacher_mean,hvp_linearity",
                     "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert code == 0
        assert "all properties passed" in out
        report = json.loads((tmp_path / "verify_report.json").read_text())
        assert report["all_passed"] is True
        assert len(report["properties"]) == 2

    def test_unknown_property_exits_one(self, tmp_path, capsys):
        code = main(["verify", "--properties", "bogus", "--out", str(tmp_path)])
        assert code == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_injected_fault_exits_three(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(
            optim, "hessian_ema_square_update",
            lambda prev, val, b2: b2 * prev - (1.0 - b2) * val * val,
        )
        code = main(["verify", "--properties", "one_step_quadratic",
                     "--out", str(tmp_path)])
        captured = capsys.readouterr()
        assert code == 3
        assert "FAILED" in captured.err
        report = json.loads((tmp_path / "verify_report.json").read_text())
        assert report["all_passed"] is False


class TestReportCommand:
    @pytest.fixture()
    def finished_run(self, tmp_path):
        main(["run", "--problem", "fig1-quadratic", "--optimizer", "adahessian",
              "--lr", "0.5", "--iters", "8", "--out", str(tmp_path),
              "--run-name", "demo", "--no-cost-ratio"])
        return tmp_path

    def test_trajectory_digest(self, finished_run, capsys):
        capsys.readouterr()
        code = main(["report", str(finished_run / "demo.trajectory.jsonl")])
        out = capsys.readouterr().out
        assert code == 0
        assert "iterations_run: 8" in out
        assert "t=1" in out

    def test_summary_report(self, finished_run, capsys):
        capsys.readouterr()
        code = main(["report", str(finished_run / "demo.summary.json")])
        out = capsys.readouterr().out
        assert code == 0
        assert "final_loss:" in out

    def test_csv_report(self, tmp_path, capsys):
        main(["sweep", "--problem", "fig1-quadratic", "--optimizer", "sgd",
              "--iters", "3", "--grid", "lr=0.01", "--seeds", "0",
              "--out", str(tmp_path), "--no-cost-ratio"])
        capsys.readouterr()
        code = main(["report", str(tmp_path / "sweep.csv")])
        assert code == 0
        assert "final_loss_mean" in capsys.readouterr().out

    def test_missing_file_exits_one(self, tmp_path):
        assert main(["report", str(tmp_path / "nope.jsonl")]) == 1

    def test_unsupported_extension_exits_one(self, tmp_path):
        path = tmp_path / "notes.txt"
        path.write_text("hello")
        assert main(["report", str(path)]) == 1


class TestParser:
    def test_subcommand_is_required(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args([])

    def test_epilog_lists_registries(self):
        parser = cli.build_parser()
        assert "adahessian" in parser.epilog
        assert "noisy-parabola" in parser.epilog
