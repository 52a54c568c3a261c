"""Coordination metrics and credit-sparsification sweeps."""

from __future__ import annotations

import csv
import math
import random
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, fields
from typing import IO, Iterable, Literal, Sequence

from .env import FactWorldSpec, Trajectory, sample_query, trajectory_game
from .game import GameError, ShapleyVector, shapley_exact, single_ablation_credit
from .optim import TrainConfig, train
from .policy import PolicyParams
from .rollout import derive_seed, rollout

Estimator = Literal["exact", "ablation"]
MAX_EXACT_REPORT_AGENTS = 12
# exact Shapley values are floats; anything this close to 0 counts as neutral
ZERO_CREDIT_TOL = 1e-12


@dataclass(frozen=True)
class CoordinationReport:
    planner_score: float
    useful_fraction: float
    harmful_fraction: float
    neutral_fraction: float
    n_invocations: int
    n_trajectories: int
    estimator: str
    source: str = ""


def trajectory_credits(trajectory: Trajectory, estimator: Estimator = "exact") -> ShapleyVector:
    game = trajectory_game(trajectory)
    if estimator == "exact":
        if trajectory.n_agents > MAX_EXACT_REPORT_AGENTS:
            raise GameError(
                f"exact estimator supports at most {MAX_EXACT_REPORT_AGENTS} agents per trajectory, got {trajectory.n_agents}"
            )
        return shapley_exact(game)
    if estimator == "ablation":
        return single_ablation_credit(game)
    raise ValueError(f"unknown estimator {estimator!r}")


def coordination_report(trajectories: Iterable[Trajectory], estimator: Estimator = "exact", source: str = "") -> CoordinationReport:
    planner = []
    useful = harmful = neutral = 0
    for t in trajectories:
        phi = trajectory_credits(t, estimator)
        planner.append(phi[0])
        for c in phi.phi[1:]:
            if c > ZERO_CREDIT_TOL:
                useful += 1
            elif c < -ZERO_CREDIT_TOL:
                harmful += 1
            else:
                neutral += 1
    n = useful + harmful + neutral
    if n:
        fractions = (useful / n, harmful / n, neutral / n)
    else:
        fractions = (0.0, 0.0, 1.0)
    return CoordinationReport(
        planner_score=math.fsum(planner) / len(planner) if planner else 0.0,
        useful_fraction=fractions[0],
        harmful_fraction=fractions[1],
        neutral_fraction=fractions[2],
        n_invocations=n,
        n_trajectories=len(planner),
        estimator=estimator,
        source=source,
    )


NUMERIC_FIELDS = ("planner_score", "useful_fraction", "harmful_fraction", "neutral_fraction", "n_invocations", "n_trajectories")


def compare_runs(report_a: CoordinationReport, report_b: CoordinationReport) -> dict[str, float]:
    """Signed deltas ``b - a`` for every numeric field."""
    return {name: getattr(report_b, name) - getattr(report_a, name) for name in NUMERIC_FIELDS}


def format_report(report: CoordinationReport) -> str:
    return (
        f"planner_score={report.planner_score:.4f} "
        f"useful={100 * report.useful_fraction:.2f}% "
        f"harmful={100 * report.harmful_fraction:.2f}% "
        f"neutral={100 * report.neutral_fraction:.2f}% "
        f"invocations={report.n_invocations} trajectories={report.n_trajectories} "
        f"estimator={report.estimator}"
    )


def format_delta(delta: dict[str, float]) -> str:
    return (
        f"planner_score {delta['planner_score']:+.4f} "
        f"useful {100 * delta['useful_fraction']:+.2f}pp "
        f"harmful {100 * delta['harmful_fraction']:+.2f}pp"
    )


REPORT_COLUMNS = tuple(f.name for f in fields(CoordinationReport))


def write_reports(reports: Sequence[CoordinationReport], fh: IO[str]) -> None:
    w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = asdict(r)
        for key in ("planner_score", "useful_fraction", "harmful_fraction", "neutral_fraction"):
            row[key] = repr(row[key])
        w.writerow(row)


def read_reports(fh: IO[str]) -> list[CoordinationReport]:
    out = []
    for row in csv.DictReader(fh):
        out.append(
            CoordinationReport(
                planner_score=float(row["planner_score"]),
                useful_fraction=float(row["useful_fraction"]),
                harmful_fraction=float(row["harmful_fraction"]),
                neutral_fraction=float(row["neutral_fraction"]),
                n_invocations=int(row["n_invocations"]),
                n_trajectories=int(row["n_trajectories"]),
                estimator=row["estimator"],
                source=row["source"],
            )
        )
    return out


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    success: float
    cost: float  # mean planner actions + tool calls per trajectory
    report: CoordinationReport
    trajectories: tuple[Trajectory, ...]


def evaluation_rollouts(spec: FactWorldSpec, params: PolicyParams, episodes: int, seed: int) -> list[Trajectory]:
    frozen = params if params.frozen else params.snapshot()
    out = []
    for k in range(episodes):
        query = sample_query(spec, random.Random(derive_seed(seed, "eval-query", k)))
        out.append(rollout(spec, frozen, query, derive_seed(seed, "eval", k), k))
    return out


def evaluate(spec: FactWorldSpec, params: PolicyParams, episodes: int, seed: int, estimator: Estimator = "exact", source: str = "eval") -> EvalResult:
    trajs = evaluation_rollouts(spec, params, episodes, seed)
    success = math.fsum(t.r_acc for t in trajs) / len(trajs)
    cost = math.fsum(len(t.planner_trace) + t.n_tool_calls() for t in trajs) / len(trajs)
    return EvalResult(success, cost, coordination_report(trajs, estimator, source), tuple(trajs))


# -- sparsification sweep -----------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    p: float
    seed: int
    train_replays: int
    eval_cost: float
    final_success: float
    harmful_fraction: float


def _sweep_job(args) -> SweepRow:
    spec, config, p, seed, eval_episodes, estimator = args
    weights = config.weights.model_copy(update={"sparsify_p": p})
    cfg = config.model_copy(update={"weights": weights, "seed": seed})
    record = train(spec, cfg)
    result = evaluate(spec, record.params, eval_episodes, derive_seed(seed, "final-eval"), estimator)
    return SweepRow(p, seed, record.total_replays, result.cost, result.success, result.report.harmful_fraction)


def sweep_p(
    env_spec: FactWorldSpec,
    config: TrainConfig,
    p_values: Sequence[float],
    seeds: Sequence[int] | None = None,
    eval_episodes: int = 256,
    estimator: Estimator = "ablation",
    executor: Executor | None = None,
) -> list[SweepRow]:
    """Train once per (p, seed); seeds are shared across p values."""
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {p}")
    seeds = [config.seed] if seeds is None else list(seeds)
    jobs = [(env_spec, config, float(p), s, eval_episodes, estimator) for p in p_values for s in seeds]
    if executor is None:
        return [_sweep_job(j) for j in jobs]
    return list(executor.map(_sweep_job, jobs))


SWEEP_COLUMNS = ("p", "n_seeds", "train_replays", "eval_cost", "final_success", "harmful_fraction")


def summarize_sweep(rows: Sequence[SweepRow]) -> list[dict]:
    """One row per p: replay totals and per-seed means."""
    by_p: dict[float, list[SweepRow]] = {}
    for r in rows:
        by_p.setdefault(r.p, []).append(r)
    out = []
    for p, rs in by_p.items():
        n = len(rs)
        out.append(
            {
                "p": p,
                "n_seeds": n,
                "train_replays": math.fsum(r.train_replays for r in rs) / n,
                "eval_cost": math.fsum(r.eval_cost for r in rs) / n,
                "final_success": math.fsum(r.final_success for r in rs) / n,
                "harmful_fraction": math.fsum(r.harmful_fraction for r in rs) / n,
            }
        )
    return out


def write_sweep(rows: Sequence[SweepRow], fh: IO[str]) -> None:
    w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in summarize_sweep(rows):
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_sweep_detail(rows: Sequence[SweepRow], fh: IO[str]) -> None:
    names = [f.name for f in fields(SweepRow)]
    w = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
