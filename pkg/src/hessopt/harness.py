"""Experiment runner: configs, trajectories, sweeps, and reports.

A run executes one (problem, optimizer) pair for a fixed number of
iterations and emits two files:

  - ``<name>.trajectory.jsonl``: one JSON object per line. The first line is
    a schema header carrying the config; each following line is a
    per-iteration record with keys t, loss, grad_norm, lr, hessian_computed
    and (for d <= 16) theta. Records contain no timing information, so a
    repeated run with the same config and seed is byte-identical.
  - ``<name>.summary.json``: final full-batch loss, iterations-to-threshold,
    per-iteration wall-time statistics (median over iterations after the
    first 10), and the measured per-iteration cost ratio against a
    same-problem gradient-descent companion run.

Sweeps run a cartesian grid of config overrides across seeds and aggregate
mean and standard deviation of the final loss per cell into a CSV. A cell
failure (numeric blow-up or a final loss beyond the divergence threshold) is
recorded and the sweep continues.

The default output directory is ``$HESSOPT_OUT`` if set, else ``./runs``.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
import statistics
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .hutchinson import HutchinsonConfig, estimate_diag, probe_rng, should_compute
from .optim import AdaHessian, make_optimizer, make_schedule, optimizer_names
from .problems import get_problem, problem_names

__all__ = [
    "ConfigError",
    "RunConfig",
    "TrajectoryRecord",
    "RunResult",
    "SweepCell",
    "default_out_dir",
    "run",
    "sweep",
    "load_trajectory",
    "summarize_trajectory",
]

TRAJECTORY_SCHEMA = "hessopt-trajectory-1"
CONFIG_SCHEMA = "hessopt-run-1"
SNAPSHOT_MAX_DIM = 16


class ConfigError(ValueError):
    """Invalid run configuration; reported before any computation starts."""


@dataclass
class RunConfig:
    """Flat description of a single run; fields mirror the CLI flags.

    ``problem_params`` and ``schedule_params`` pass through to the problem
    builder and schedule factory. ``loss_threshold`` feeds the
    iterations-to-threshold summary statistic; ``divergence_loss`` marks a
    finished run as diverged in sweeps when the final loss exceeds it.
    """

    problem: str = "fig1-quadratic"
    problem_params: dict = field(default_factory=dict)
    optimizer: str = "adahessian"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    k: float = 1.0
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.9
    block_size: int = 1
    hessian_ema: bool = True
    samples: int = 1
    hessian_freq: int = 1
    warmup: int = 0
    schedule: str = "constant"
    schedule_params: dict = field(default_factory=dict)
    iters: int = 100
    seed: int = 0
    out: str | None = None
    run_name: str | None = None
    loss_threshold: float | None = None
    divergence_loss: float | None = None
    cost_ratio: bool = True

    def validate(self) -> "RunConfig":
        if self.problem not in problem_names():
            raise ConfigError(
                f"unknown problem {self.problem!r}; available: {', '.join(problem_names())}"
            )
        if self.optimizer not in optimizer_names():
            raise ConfigError(
                f"unknown optimizer {self.optimizer!r}; available: {', '.join(optimizer_names())}"
            )
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if self.hessian_freq < 1:
            raise ConfigError("hessian-freq must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if self.block_size < 1:
            raise ConfigError("block-size must be >= 1")
        if not 0.0 <= self.k <= 1.0:
            raise ConfigError("k must lie in [0, 1]")
        try:
            make_schedule(self.schedule, **self.schedule_params)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid schedule: {exc}") from None
        return self

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Load a JSON config file (schema ``hessopt-run-1``)."""
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        data.pop("schema", None)
        return cls().with_overrides(data)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return replace(self, **overrides)

    def to_dict(self, include_out: bool = True) -> dict:
        data = {"schema": CONFIG_SCHEMA}
        for f in fields(self):
            if not include_out and f.name in ("out", "run_name"):
                continue
            data[f.name] = getattr(self, f.name)
        return data

    def default_run_name(self) -> str:
        return self.run_name or f"{self.problem}_{self.optimizer}_s{self.seed}"


@dataclass
class TrajectoryRecord:
    """Per-iteration measurements at the pre-step parameter point."""

    t: int
    loss: float
    grad_norm: float
    lr: float
    hessian_computed: bool
    theta: list | None = None
    elapsed_s: float = 0.0  # kept in memory; never serialized to the trajectory

    def to_line_dict(self) -> dict:
        data = {"t": self.t, "loss": self.loss, "grad_norm": self.grad_norm,
                "lr": self.lr, "hessian_computed": self.hessian_computed}
        if self.theta is not None:
            data["theta"] = self.theta
        return data


@dataclass
class RunResult:
    config: RunConfig
    records: list[TrajectoryRecord]
    theta_final: np.ndarray
    summary: dict
    status: str  # "ok" or "numeric_failure"
    trajectory_path: Path | None = None
    summary_path: Path | None = None

    @property
    def final_loss(self) -> float:
        return self.summary["final_loss"]


@dataclass
class SweepCell:
    overrides: dict
    seeds: list[int]
    final_losses: list[float]
    diverged: int
    cost_ratios: list[float]

    def row(self) -> dict:
        finite = [x for x in self.final_losses if np.isfinite(x)]
        row = dict(self.overrides)
        row["n_seeds"] = len(self.seeds)
        row["diverged"] = self.diverged
        row["final_loss_mean"] = statistics.fmean(finite) if finite else float("nan")
        row["final_loss_std"] = (
            statistics.stdev(finite) if len(finite) > 1 else 0.0 if finite else float("nan")
        )
        if self.cost_ratios:
            row["cost_ratio_mean"] = statistics.fmean(self.cost_ratios)
        return row


def default_out_dir() -> Path:
    return Path(os.environ.get("HESSOPT_OUT", "runs"))


def _dump_json_line(data: dict) -> str:
    # Fixed separators and sorted keys keep serialization byte-stable.
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _warm_times(times: list[float]) -> list[float]:
    # Discard cold-cache iterations before aggregating.
    return times[10:] if len(times) > 10 else times


def _median_iter_time(records: list[TrajectoryRecord]) -> float:
    times = _warm_times([r.elapsed_s for r in records])
    return statistics.median(times) if times else 0.0


def _mean_iter_time(records: list[TrajectoryRecord]) -> float:
    times = _warm_times([r.elapsed_s for r in records])
    return statistics.fmean(times) if times else 0.0


def _amortized_iter_time(records: list[TrajectoryRecord]) -> float:
    """Robust amortized per-iteration time.

    Iterations that computed a curvature estimate cost more than ones that
    reused the last estimate, so a plain mean is dominated by scheduler
    noise while a plain median forgets the expensive class entirely once it
    is in the minority. Instead: take the median within each class and weight
    by how often the class occurs.
    """
    warm = records[10:] if len(records) > 10 else records
    if not warm:
        return 0.0
    with_est = [r.elapsed_s for r in warm if r.hessian_computed]
    without = [r.elapsed_s for r in warm if not r.hessian_computed]
    total = len(warm)
    out = 0.0
    if with_est:
        out += statistics.median(with_est) * (len(with_est) / total)
    if without:
        out += statistics.median(without) * (len(without) / total)
    return out


def _sgd_companion_time(problem, iters: int, seed: int) -> float:
    """Median warm per-iteration time of a plain first-order loop, same problem.

    The learning rate is tiny so the iterates stay in a numerically ordinary
    region; only the timing is used.
    """
    opt = make_optimizer("sgd", problem.dim, lr=1e-9, momentum=0.9)
    theta = problem.theta0.copy()
    times = []
    for t in range(1, iters + 1):
        batch = problem.sample_batch(t, seed)
        start = time.perf_counter()
        _, g = problem.value_and_gradient(theta, batch)
        theta = opt.step(theta, g)
        times.append(time.perf_counter() - start)
    times = _warm_times(times)
    return statistics.median(times) if times else 0.0


def run(config: RunConfig, write_files: bool = True) -> RunResult:
    """Execute one configured run; optionally write trajectory and summary.

    Raises ConfigError for invalid configs before any compute. A numeric
    failure mid-run preserves all records up to the failing iteration, writes
    them out, and returns with ``status="numeric_failure"``.
    """
    config.validate()
    problem = get_problem(config.problem, **config.problem_params)
    is_second_order = config.optimizer == "adahessian"
    hyper: dict = {"lr": config.lr}
    if config.optimizer in ("adam", "adamw", "adahessian"):
        hyper.update(beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                     weight_decay=config.weight_decay)
    elif config.optimizer == "rmsprop":
        hyper.update(beta2=config.beta2, eps=config.eps, weight_decay=config.weight_decay)
    elif config.optimizer == "adagrad":
        hyper.update(eps=config.eps, weight_decay=config.weight_decay)
    elif config.optimizer == "sgd":
        hyper.update(momentum=config.momentum, weight_decay=config.weight_decay)
    if is_second_order:
        hyper.update(k=config.k, block_size=config.block_size,
                     hessian_ema=config.hessian_ema)
    opt = make_optimizer(config.optimizer, problem.dim,
                         group_sizes=problem.group_sizes, **hyper)
    schedule = make_schedule(config.schedule, **config.schedule_params)
    hcfg = HutchinsonConfig(samples_per_estimate=config.samples,
                            frequency=config.hessian_freq,
                            warmup_steps=config.warmup, seed=config.seed)

    theta = problem.theta0.copy()
    snapshot = problem.dim <= SNAPSHOT_MAX_DIM
    records: list[TrajectoryRecord] = []
    status = "ok"
    failure_detail = None
    traj_path = summary_path = None
    traj_file = None
    if write_files:
        out_dir = Path(config.out) if config.out else default_out_dir()
        out_dir.mkdir(parents=True, exist_ok=True)
        name = config.default_run_name()
        traj_path = out_dir / f"{name}.trajectory.jsonl"
        summary_path = out_dir / f"{name}.summary.json"
        traj_file = traj_path.open("w")
        header = {"schema": TRAJECTORY_SCHEMA,
                  "config": config.to_dict(include_out=False)}
        traj_file.write(_dump_json_line(header) + "\n")

    try:
        for t in range(1, config.iters + 1):
            batch = problem.sample_batch(t, config.seed)
            start = time.perf_counter()
            try:
                if is_second_order:
                    loss, g, hvp_fn = problem.full_tape(theta, batch)
                    computed = should_compute(t, hcfg)
                    Ds = None
                    if computed:
                        est = estimate_diag(problem, theta, batch, hcfg,
                                            probe_rng(config.seed, t),
                                            iteration=t, hvp=hvp_fn)
                        Ds = opt.average_diagonal(est.values)
                    lr_factor = schedule(t)
                    theta = opt.step(theta, g, Ds=Ds, lr_factor=lr_factor)
                else:
                    loss, g = problem.value_and_gradient(theta, batch)
                    computed = False
                    lr_factor = schedule(t)
                    theta = opt.step(theta, g, lr_factor=lr_factor)
            except NumericError as exc:
                status = "numeric_failure"
                failure_detail = str(exc)
                break
            elapsed = time.perf_counter() - start
            record = TrajectoryRecord(
                t=t,
                loss=float(loss),
                grad_norm=float(np.linalg.norm(g)),
                lr=float(config.lr * lr_factor),
                hessian_computed=bool(computed),
                theta=[float(x) for x in theta] if snapshot else None,
                elapsed_s=elapsed,
            )
            records.append(record)
            if traj_file is not None:
                traj_file.write(_dump_json_line(record.to_line_dict()) + "\n")
    finally:
        if traj_file is not None:
            traj_file.close()

    if status == "ok":
        try:
            final_loss = problem.value(theta)
        except NumericError:
            final_loss = float("inf")
    else:
        final_loss = float("inf")

    iters_to_threshold = None
    if config.loss_threshold is not None:
        for r in records:
            if r.loss <= config.loss_threshold:
                iters_to_threshold = r.t
                break

    mean_time = _mean_iter_time(records)
    summary = {
        "schema": "hessopt-summary-1",
        "status": status,
        "problem": config.problem,
        "optimizer": config.optimizer,
        "seed": config.seed,
        "iterations_run": len(records),
        "final_loss": float(final_loss),
        "final_grad_norm": records[-1].grad_norm if records else None,
        "best_recorded_loss": min((r.loss for r in records), default=None),
        "iterations_to_threshold": iters_to_threshold,
        "hessian_estimates_computed": sum(r.hessian_computed for r in records),
        "median_iter_seconds": _median_iter_time(records),
        "mean_iter_seconds": mean_time,
        "amortized_iter_seconds": _amortized_iter_time(records),
    }
    if failure_detail:
        summary["failure"] = failure_detail
    if config.cost_ratio and status == "ok" and records:
        sgd_time = _sgd_companion_time(problem, config.iters, config.seed)
        if sgd_time > 0:
            summary["sgd_median_iter_seconds"] = sgd_time
            summary["cost_ratio_vs_sgd"] = summary["amortized_iter_seconds"] / sgd_time

    if summary_path is not None:
        summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")

    return RunResult(config=config, records=records, theta_final=theta,
                     summary=summary, status=status,
                     trajectory_path=traj_path, summary_path=summary_path)


def _is_diverged(config: RunConfig, result: RunResult) -> bool:
    if result.status != "ok" or not np.isfinite(result.final_loss):
        return True
    limit = config.divergence_loss
    return limit is not None and result.final_loss > limit


def sweep(base: RunConfig, axes: dict[str, list], seeds: list[int],
          out: str | Path | None = None,
          csv_name: str = "sweep.csv") -> tuple[list[SweepCell], Path | None]:
    """Cartesian grid of config overrides, each cell repeated across seeds.

    Returns the per-cell aggregates and the CSV path (None if ``out`` is
    unset and the base config has no output directory). Individual cell
    failures are counted as diverged; the sweep always completes.
    """
    base.validate()
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    for axis in axes:
        if axis not in {f.name for f in fields(base)}:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        if not axes[axis]:
            raise ConfigError(f"sweep axis {axis!r} has no values")
    cells: list[SweepCell] = []
    axis_names = sorted(axes)
    for combo in itertools.product(*(axes[a] for a in axis_names)):
        overrides = dict(zip(axis_names, combo))
        losses, ratios = [], []
        diverged = 0
        for seed in seeds:
            cfg = base.with_overrides({**overrides, "seed": seed}).validate()
            try:
                result = run(cfg, write_files=False)
            except NumericError:
                diverged += 1
                losses.append(float("inf"))
                continue
            if _is_diverged(cfg, result):
                diverged += 1
            losses.append(result.final_loss)
            ratio = result.summary.get("cost_ratio_vs_sgd")
            if ratio is not None:
                ratios.append(ratio)
        cells.append(SweepCell(overrides=overrides, seeds=list(seeds),
                               final_losses=losses, diverged=diverged,
                               cost_ratios=ratios))

    csv_path = None
    out_dir = Path(out) if out is not None else (
        Path(base.out) if base.out else default_out_dir()
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / csv_name
    rows = [cell.row() for cell in cells]
    fieldnames = list(rows[0].keys()) if rows else axis_names
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return cells, csv_path


def load_trajectory(path: str | Path) -> tuple[dict, list[dict]]:
    """Read a trajectory file back into (header, records)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty trajectory file: {path}")
    header = json.loads(lines[0])
    if header.get("schema") != TRAJECTORY_SCHEMA:
        raise ValueError(f"unrecognized trajectory schema in {path}")
    return header, [json.loads(line) for line in lines[1:]]


def summarize_trajectory(path: str | Path) -> dict:
    """Recompute summary statistics from a trajectory file alone."""
    header, records = load_trajectory(path)
    if not records:
        return {"iterations_run": 0, "config": header.get("config", {})}
    losses = [r["loss"] for r in records]
    return {
        "config": header.get("config", {}),
        "iterations_run": len(records),
        "first_loss": losses[0],
        "last_recorded_loss": losses[-1],
        "best_recorded_loss": min(losses),
        "final_grad_norm": records[-1]["grad_norm"],
        "hessian_estimates_computed": sum(r["hessian_computed"] for r in records),
    }
