"""Tests for the run/sweep harness: configs, trajectories, failure paths."""

import csv
import json

import numpy as np
import pytest

from hessopt import harness
from hessopt.harness import (
    ConfigError,
    RunConfig,
    default_out_dir,
    load_trajectory,
    run,
    summarize_trajectory,
    sweep,
)


def quick_config(tmp_path, **overrides):
    base = dict(problem="fig1-quadratic", optimizer="adahessian", lr=0.1,
                iters=5, seed=0, out=str(tmp_path), cost_ratio=False)
    base.update(overrides)
    return RunConfig(**base)


class TestRunConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"problem": "rosenbrock"},
            {"optimizer": "newton"},
            {"lr": 0.0},
            {"lr": -1.0},
            {"iters": 0},
            {"hessian_freq": 0},
            {"warmup": -1},
            {"samples": 0},
            {"block_size": 0},
            {"k": 2.0},
            {"schedule": "cosine"},
            {"schedule": "step_decay", "schedule_params": {"milestones": [0]}},
        ],
    )
    def test_invalid_fields_raise_config_error(self, overrides):
        with pytest.raises(ConfigError):
            RunConfig(**overrides).validate()

    def test_unknown_override_keys_raise(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            RunConfig().with_overrides({"learning_rate": 0.1})

    def test_from_file_and_override_precedence(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"schema": "hessopt-run-1", "lr": 0.5, "iters": 7}))
        cfg = RunConfig.from_file(path)
        assert cfg.lr == 0.5 and cfg.iters == 7
        cfg2 = cfg.with_overrides({"lr": 0.25})
        assert cfg2.lr == 0.25 and cfg2.iters == 7

    def test_from_file_missing_or_malformed(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.from_file(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            RunConfig.from_file(bad)
        arr = tmp_path / "arr.json"
        arr.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            RunConfig.from_file(arr)

    def test_header_dict_excludes_output_fields(self):
        cfg = RunConfig(out="/tmp/x", run_name="n")
        header = cfg.to_dict(include_out=False)
        assert "out" not in header and "run_name" not in header
        assert header["schema"] == "hessopt-run-1"

    def test_default_run_name(self):
        assert RunConfig(seed=3).default_run_name() == "fig1-quadratic_adahessian_s3"
        assert RunConfig(run_name="custom").default_run_name() == "custom"


class TestRun:
    def test_one_step_quadratic_reaches_optimum(self, tmp_path):
        cfg = quick_config(tmp_path, lr=1.0, k=1.0, eps=0.0, iters=1)
        result = run(cfg)
        assert result.status == "ok"
        assert result.final_loss == 0.0
        np.testing.assert_allclose(result.theta_final, [0.0, 0.0], atol=1e-15)

    def test_record_fields_and_snapshot_for_small_problems(self, tmp_path):
        result = run(quick_config(tmp_path, iters=3))
        assert len(result.records) == 3
        first = result.records[0]
        assert first.t == 1
        assert first.loss == pytest.approx(11.0)
        assert first.grad_norm == pytest.approx(np.hypot(20.0, 2.0))
        assert first.lr == pytest.approx(0.1)
        assert first.hessian_computed is True
        assert first.theta is not None and len(first.theta) == 2

    def test_large_problems_omit_parameter_snapshots(self, tmp_path):
        cfg = quick_config(tmp_path, problem="tiny-mlp", optimizer="sgd",
                           lr=0.01, iters=2)
        result = run(cfg)
        assert all(r.theta is None for r in result.records)

    def test_sgd_cannot_match_one_step_convergence(self, tmp_path):
        # first-order descent on the (20, 2) quadratic stays away from the
        # optimum for many iterations at any stable fixed step size
        for lr in (0.09, 0.05):
            cfg = quick_config(tmp_path, optimizer="sgd", momentum=0.0,
                               lr=lr, iters=10)
            result = run(cfg, write_files=False)
            assert result.status == "ok"
            assert result.final_loss > 1e-6

    def test_sgd_loss_decreases_at_stable_step(self, tmp_path):
        cfg = quick_config(tmp_path, optimizer="sgd", momentum=0.0, lr=0.05,
                           iters=20)
        result = run(cfg, write_files=False)
        losses = [r.loss for r in result.records]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_hessian_frequency_marks_computed_iterations(self, tmp_path):
        cfg = quick_config(tmp_path, hessian_freq=5, warmup=3, iters=15)
        result = run(cfg, write_files=False)
        computed = [r.t for r in result.records if r.hessian_computed]
        assert computed == [1, 2, 3, 4, 9, 14]
        assert result.summary["hessian_estimates_computed"] == 6

    def test_schedule_multiplies_recorded_lr(self, tmp_path):
        cfg = quick_config(
            tmp_path, optimizer="sgd", lr=0.04, iters=4,
            schedule="step_decay",
            schedule_params={"milestones": [3], "factor": 0.5},
        )
        result = run(cfg, write_files=False)
        np.testing.assert_allclose(
            [r.lr for r in result.records], [0.04, 0.04, 0.02, 0.02]
        )

    def test_iterations_to_threshold(self, tmp_path):
        cfg = quick_config(tmp_path, lr=0.5, iters=30, loss_threshold=0.5)
        result = run(cfg, write_files=False)
        t = result.summary["iterations_to_threshold"]
        assert t is not None
        assert result.records[t - 1].loss <= 0.5
        assert all(r.loss > 0.5 for r in result.records[: t - 1])
        unset = run(quick_config(tmp_path, iters=3), write_files=False)
        assert unset.summary["iterations_to_threshold"] is None

    def test_cost_ratio_toggle(self, tmp_path):
        with_ratio = run(quick_config(tmp_path, iters=12, cost_ratio=True),
                         write_files=False)
        assert "cost_ratio_vs_sgd" in with_ratio.summary
        assert with_ratio.summary["cost_ratio_vs_sgd"] > 0
        without = run(quick_config(tmp_path, iters=12, cost_ratio=False),
                      write_files=False)
        assert "cost_ratio_vs_sgd" not in without.summary

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_preserves_partial_trajectory(self, tmp_path):
        cfg = quick_config(tmp_path, optimizer="sgd", lr=1e18, iters=50)
        result = run(cfg)
        assert result.status == "numeric_failure"
        assert result.final_loss == float("inf")
        assert 1 <= len(result.records) < 50
        assert "failure" in result.summary
        header, lines = load_trajectory(result.trajectory_path)
        assert len(lines) == len(result.records)

    def test_invalid_config_raises_before_compute(self, tmp_path):
        with pytest.raises(ConfigError):
            run(quick_config(tmp_path, lr=-1.0))


class TestTrajectoryFiles:
    def test_header_then_one_line_per_iteration(self, tmp_path):
        cfg = quick_config(tmp_path, iters=4, run_name="t")
        result = run(cfg)
        header, records = load_trajectory(result.trajectory_path)
        assert header["schema"] == "hessopt-trajectory-1"
        assert header["config"]["problem"] == "fig1-quadratic"
        assert "out" not in header["config"]
        assert len(records) == 4
        assert [r["t"] for r in records] == [1, 2, 3, 4]
        for r in records:
            assert set(r) == {"t", "loss", "grad_norm", "lr", "hessian_computed", "theta"}

    def test_repeated_runs_are_byte_identical(self, tmp_path):
        a = run(quick_config(tmp_path / "a", iters=20, seed=5,
                             problem="logreg", lr=0.05))
        b = run(quick_config(tmp_path / "b", iters=20, seed=5,
                             problem="logreg", lr=0.05))
        assert a.trajectory_path.read_bytes() == b.trajectory_path.read_bytes()

    def test_different_seeds_differ_on_stochastic_problem(self, tmp_path):
        a = run(quick_config(tmp_path / "a", iters=10, seed=0, problem="tiny-mlp",
                             lr=0.05))
        b = run(quick_config(tmp_path / "b", iters=10, seed=1, problem="tiny-mlp",
                             lr=0.05))
        assert a.trajectory_path.read_bytes() != b.trajectory_path.read_bytes()

    def test_summary_file_matches_result(self, tmp_path):
        result = run(quick_config(tmp_path, iters=6))
        on_disk = json.loads(result.summary_path.read_text())
        assert on_disk["final_loss"] == result.summary["final_loss"]
        assert on_disk["status"] == "ok"
        assert on_disk["iterations_run"] == 6

    def test_summarize_trajectory_agrees_with_summary(self, tmp_path):
        result = run(quick_config(tmp_path, iters=8))
        digest = summarize_trajectory(result.trajectory_path)
        assert digest["iterations_run"] == 8
        assert digest["best_recorded_loss"] == result.summary["best_recorded_loss"]
        assert digest["final_grad_norm"] == result.summary["final_grad_norm"]
        assert digest["hessian_estimates_computed"] == result.summary[
            "hessian_estimates_computed"
        ]

    def test_load_trajectory_rejects_unknown_schema(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text('{"schema":"other"}\n')
        with pytest.raises(ValueError):
            load_trajectory(path)

    def test_default_out_dir_honors_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HESSOPT_OUT", str(tmp_path / "env_runs"))
        assert default_out_dir() == tmp_path / "env_runs"
        result = run(RunConfig(problem="fig1-quadratic", optimizer="sgd",
                               lr=0.01, iters=1, cost_ratio=False))
        assert result.trajectory_path.parent == tmp_path / "env_runs"


class TestSweep:
    def test_grid_cells_and_csv(self, tmp_path):
        base = quick_config(tmp_path, optimizer="sgd", iters=5)
        cells, csv_path = sweep(base, {"lr": [0.01, 0.02], "momentum": [0.0, 0.5]},
                                seeds=[0, 1], out=tmp_path)
        assert len(cells) == 4
        assert all(len(c.final_losses) == 2 for c in cells)
        with csv_path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert {"lr", "momentum", "n_seeds", "diverged", "final_loss_mean",
                "final_loss_std"} <= set(rows[0])
        assert all(row["n_seeds"] == "2" for row in rows)

    def test_divergence_threshold_counts_cells(self, tmp_path):
        base = quick_config(tmp_path, optimizer="sgd", momentum=0.0, iters=10,
                            divergence_loss=1.0)
        cells, _ = sweep(base, {"lr": [0.05, 0.11]}, seeds=[0], out=tmp_path)
        by_lr = {c.overrides["lr"]: c for c in cells}
        assert by_lr[0.05].diverged == 0
        # lr > 2/beta on the (20, 2) quadratic oscillates outward
        assert by_lr[0.11].diverged == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_blowup_counts_as_diverged(self, tmp_path):
        base = quick_config(tmp_path, optimizer="sgd", iters=60)
        cells, _ = sweep(base, {"lr": [1e18]}, seeds=[0], out=tmp_path)
        assert cells[0].diverged == 1
        assert cells[0].final_losses == [float("inf")]

    def test_unknown_axis_raises(self, tmp_path):
        base = quick_config(tmp_path)
        with pytest.raises(ConfigError, match="axis"):
            sweep(base, {"stepsize": [0.1]}, seeds=[0], out=tmp_path)

    def test_empty_seeds_or_axis_values_raise(self, tmp_path):
        base = quick_config(tmp_path)
        with pytest.raises(ConfigError):
            sweep(base, {"lr": [0.1]}, seeds=[], out=tmp_path)
        with pytest.raises(ConfigError):
            sweep(base, {"lr": []}, seeds=[0], out=tmp_path)
