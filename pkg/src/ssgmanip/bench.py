"""Experiment matrix: covariance-game batches, model-mismatch scenarios, CSV output."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .behavior import ModelKind
from .defender import PGDConfig
from .game import generate_covariance_game
from .planner import evaluate_plan, nonmanipulative_baseline, optimize_plan, per_step_utilities

log = logging.getLogger(__name__)

WORKERS_ENV = "SSGMANIP_WORKERS"
BASELINE_LABEL = "nonManipulate"
RUN_HEADER = ["n_targets", "horizon", "covariance_r", "seed", "scenario",
              "att_util_per_step", "def_util_per_step", "runtime_sec", "converged"]
AGG_HEADER = ["n_targets", "horizon", "scenario", "att_mean", "att_stderr",
              "def_mean", "def_stderr", "runtime_mean_sec", "count", "errors"]
PANEL_HEADER = ["n_targets", "scenario", "mean", "stderr"]
RUNTIME_HEADER = ["n_targets", "T", "mean_minutes"]


@dataclass(frozen=True)
class ScenarioSpec:
    """Model the attacker plans against and model the defender actually learns."""

    attacker_assumed: Optional[ModelKind]
    defender_actual: Optional[ModelKind]

    @property
    def label(self) -> str:
        if self.attacker_assumed is None:
            return BASELINE_LABEL
        return f"{self.attacker_assumed.value}vs{self.defender_actual.value}"

    @property
    def is_baseline(self) -> bool:
        return self.attacker_assumed is None

    @classmethod
    def parse(cls, label: str) -> "ScenarioSpec":
        if label == BASELINE_LABEL:
            return cls(None, None)
        a, sep, d = label.partition("vs")
        if not sep:
            raise ValueError(f"scenario label must look like 'QRvsSUQR', got {label!r}")
        return cls(ModelKind.parse(a), ModelKind.parse(d))


def all_scenarios() -> list[ScenarioSpec]:
    kinds = list(ModelKind)
    return [ScenarioSpec(a, d) for a in kinds for d in kinds] + [ScenarioSpec(None, None)]


@dataclass
class ExperimentConfig:
    target_counts: list = field(default_factory=lambda: [4, 8, 12])
    horizons: list = field(default_factory=lambda: [2, 4])
    covariance_values: list = field(default_factory=lambda: [-1.0, -0.8, -0.6, -0.4, -0.2, 0.0])
    games_per_r: int = 3
    K: int = 50
    resource_ratio: float = 0.5
    seeds: Optional[list] = None        # one game seed per game index; default 0..games_per_r-1
    cfg: PGDConfig = field(default_factory=PGDConfig)
    output_dir: str = "results"
    scenarios: Optional[list] = None    # labels; default all ten
    solver: str = "pgd"                 # the actual defender's patrol solver

    def __post_init__(self):
        if isinstance(self.cfg, dict):
            self.cfg = PGDConfig.from_dict(self.cfg)
        for name in ("target_counts", "horizons", "covariance_values"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        if any(not -1.0 <= r <= 0.0 for r in self.covariance_values):
            raise ValueError("covariance values must lie in [-1, 0]")
        if self.games_per_r < 1 or self.K < 0:
            raise ValueError("games_per_r must be >= 1 and K >= 0")
        if self.seeds is not None and len(self.seeds) != self.games_per_r:
            raise ValueError("seeds must list one seed per game")
        if self.solver not in ("pgd", "alt"):
            raise ValueError(f"unknown solver {self.solver!r}")
        for label in self.scenarios or []:
            ScenarioSpec.parse(label)

    @property
    def game_seeds(self) -> list:
        return list(self.seeds) if self.seeds is not None else list(range(self.games_per_r))

    @property
    def scenario_specs(self) -> list[ScenarioSpec]:
        if self.scenarios is None:
            return all_scenarios()
        return [ScenarioSpec.parse(s) for s in self.scenarios]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cfg"] = self.cfg.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunRecord:
    n_targets: int
    horizon: int
    covariance_r: float
    seed: int
    scenario: str
    att_util_per_step: float
    def_util_per_step: float
    runtime_sec: float
    converged: str          # "true", "false" or "error:<type>"

    @property
    def errored(self) -> bool:
        return self.converged.startswith("error")

    def row(self) -> list:
        return [self.n_targets, self.horizon, repr(float(self.covariance_r)), self.seed,
                self.scenario, repr(float(self.att_util_per_step)),
                repr(float(self.def_util_per_step)), f"{self.runtime_sec:.3f}", self.converged]


@dataclass(frozen=True)
class _Job:
    n_targets: int
    horizon: int
    covariance_r: float
    seed: int


def _jobs(config: ExperimentConfig) -> list[_Job]:
    return [_Job(n, T, float(r), int(s))
            for n, T, r, s in itertools.product(config.target_counts, config.horizons,
                                                config.covariance_values, config.game_seeds)]


def _error_record(job: _Job, label: str, exc: BaseException, runtime: float) -> RunRecord:
    log.error("run N=%d T=%d r=%g seed=%d %s failed: %s", job.n_targets, job.horizon,
              job.covariance_r, job.seed, label, exc)
    log.debug("%s", traceback.format_exc())
    return RunRecord(job.n_targets, job.horizon, job.covariance_r, job.seed, label,
                     math.nan, math.nan, runtime, f"error:{type(exc).__name__}")


def _run_job(job: _Job, config: ExperimentConfig) -> list[RunRecord]:
    """Every scenario on one game; plans are shared across defender models."""
    out = []
    try:
        game = generate_covariance_game(job.n_targets, job.covariance_r, job.seed,
                                        config.resource_ratio, max_attacks=config.K,
                                        horizon=job.horizon)
    except Exception as exc:    # noqa: BLE001 - a failed run becomes a row
        return [_error_record(job, s.label, exc, 0.0) for s in config.scenario_specs]
    plans = {}
    for spec in config.scenario_specs:
        start = time.perf_counter()
        try:
            if spec.is_baseline:
                _, traj = nonmanipulative_baseline(game, job.horizon)
                util = per_step_utilities(game, traj.strategies, traj.attacks)
                conv = True
                runtime = time.perf_counter() - start
            else:
                if spec.attacker_assumed not in plans:
                    plans[spec.attacker_assumed] = optimize_plan(
                        game, spec.attacker_assumed, spec.defender_actual, config.cfg)
                res = plans[spec.attacker_assumed]
                _, traj, util = evaluate_plan(game, res.plan, spec.attacker_assumed,
                                              spec.defender_actual, config.cfg,
                                              solver=config.solver)
                conv = res.converged and traj.converged
                runtime = res.runtime_sec + time.perf_counter() - start
        except Exception as exc:    # noqa: BLE001
            out.append(_error_record(job, spec.label, exc, time.perf_counter() - start))
            continue
        out.append(RunRecord(job.n_targets, job.horizon, job.covariance_r, job.seed, spec.label,
                             util.attacker, util.defender, runtime, "true" if conv else "false"))
    return out


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def run_records(config: ExperimentConfig, workers: Optional[int] = None) -> list[RunRecord]:
    """Run every (N, T, r, seed, scenario) cell, in enumeration order."""
    jobs = _jobs(config)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        batches = [_run_job(j, config) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_job, jobs, itertools.repeat(config)))
    return [r for batch in batches for r in batch]


def _mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def aggregate(records: Iterable[RunRecord]) -> list[dict]:
    """Means and standard errors across games, keyed by (N, T, scenario)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.n_targets, r.horizon, r.scenario), []).append(r)
    rows = []
    for (n, T, label), rs in groups.items():
        ok = [r for r in rs if not r.errored]
        am, ase = _mean_stderr([r.att_util_per_step for r in ok])
        dm, dse = _mean_stderr([r.def_util_per_step for r in ok])
        rt = float(np.mean([r.runtime_sec for r in ok])) if ok else math.nan
        rows.append({"n_targets": n, "horizon": T, "scenario": label, "att_mean": am,
                     "att_stderr": ase, "def_mean": dm, "def_stderr": dse,
                     "runtime_mean_sec": rt, "count": len(ok), "errors": len(rs) - len(ok)})
    return rows


def _write_csv(path: Path, header: list, rows: Iterable[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class MatrixResult:
    records: list
    aggregate: list
    runs_csv: Path
    aggregate_csv: Path

    @property
    def n_errors(self) -> int:
        return sum(r.errored for r in self.records)


def run_matrix(config: ExperimentConfig, workers: Optional[int] = None) -> MatrixResult:
    """Run the matrix and write ``runs.csv`` and ``aggregate.csv`` to ``config.output_dir``."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = run_records(config, workers)
    agg = aggregate(records)
    runs_csv, agg_csv = out / "runs.csv", out / "aggregate.csv"
    _write_csv(runs_csv, RUN_HEADER, (r.row() for r in records))
    _write_csv(agg_csv, AGG_HEADER, ([_fmt(row[k]) for k in AGG_HEADER] for row in agg))
    return MatrixResult(records, agg, runs_csv, agg_csv)


def read_runs_csv(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        return [RunRecord(int(d["n_targets"]), int(d["horizon"]), float(d["covariance_r"]),
                          int(d["seed"]), d["scenario"], float(d["att_util_per_step"]),
                          float(d["def_util_per_step"]), float(d["runtime_sec"]), d["converged"])
                for d in csv.DictReader(fh)]


def emit_plotdata(records: Sequence[RunRecord], output_dir, *,
                  scenarios: Optional[Sequence[str]] = None) -> list[Path]:
    """Per-panel CSVs: utility vs target count per scenario, runtime vs target count.

    Utility panels are ``attacker_T{T}.csv`` and ``defender_T{T}.csv`` with
    columns n_targets, scenario, mean, stderr.  ``runtime.csv`` averages the
    planner wall-clock of manipulated runs in minutes.  ``scenarios`` limits
    the rows written; an empty selection leaves header-only files.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    keep = None if scenarios is None else set(scenarios)
    ok = [r for r in records if not r.errored and (keep is None or r.scenario in keep)]
    horizons = sorted({r.horizon for r in records})
    written = []
    for T in horizons:
        for side, attr in (("attacker", "att_util_per_step"), ("defender", "def_util_per_step")):
            groups: dict = {}
            for r in ok:
                if r.horizon == T:
                    groups.setdefault((r.n_targets, r.scenario), []).append(getattr(r, attr))
            rows = []
            for (n, label), vals in sorted(groups.items()):
                m, se = _mean_stderr(vals)
                rows.append([n, label, _fmt(m), _fmt(se)])
            path = out / f"{side}_T{T}.csv"
            _write_csv(path, PANEL_HEADER, rows)
            written.append(path)
    times: dict = {}
    for r in ok:
        if r.scenario != BASELINE_LABEL:
            times.setdefault((r.n_targets, r.horizon), []).append(r.runtime_sec)
    path = out / "runtime.csv"
    _write_csv(path, RUNTIME_HEADER,
               ([n, T, f"{np.mean(v) / 60.0:.6f}"] for (n, T), v in sorted(times.items())))
    written.append(path)
    return written


__all__ = [
    "ScenarioSpec", "ExperimentConfig", "RunRecord", "MatrixResult", "all_scenarios",
    "run_records", "run_matrix", "aggregate", "emit_plotdata", "read_runs_csv",
    "worker_count", "WORKERS_ENV", "RUN_HEADER", "AGG_HEADER",
]
