"""Per-agent group-relative advantages and the clipped surrogate update."""

from __future__ import annotations

import csv
import math
import random
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import IO, Callable, Iterable, Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .env import AgentId, FactWorldSpec, QueryInstance, sample_query
from .policy import ROLES, Gradient, PolicyParams, agent_logprob_and_grad, agent_logprob_sum
from .reward import CreditAssignment, RewardWeights, score_batch
from .rollout import GroupBatch, collect_group, derive_seed


class DivergenceError(RuntimeError):
    def __init__(self, step: int, objective: float, bound: float):
        self.step = step
        self.objective = objective
        super().__init__(f"objective {objective!r} at step {step} exceeds divergence bound {bound}")


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    weights: RewardWeights = RewardWeights()
    G: int = Field(default=8, ge=2)
    epsilon_clip: float = Field(default=0.2, gt=0.0)
    delta_stab: float = Field(default=1e-6, gt=0.0)
    learning_rate: float = Field(default=1e-5, gt=0.0)
    steps: int = Field(default=180, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    optimizer: Literal["sgd", "adamw"] = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    grouping: Literal["slot", "role"] = "slot"
    divergence_bound: float = Field(default=1e6, gt=0.0)


# -- group statistics -----------------------------------------------------------


@dataclass(frozen=True)
class StatEntry:
    mu: float
    sigma: float
    n_samples: int


GroupStats = dict[tuple, StatEntry]


def identity_key(agent: AgentId, grouping: str = "slot") -> tuple:
    return tuple(agent) if grouping == "slot" else (agent.role,)


def group_stats(rewards: dict[tuple[int, AgentId], object], grouping: str = "slot") -> GroupStats:
    """Mean and population std of ``r_total`` per agent identity.

    Only trajectories in which the identity took part contribute samples.
    """
    samples: dict[tuple, list[float]] = {}
    for (_, m), bundle in rewards.items():
        r = bundle.r_total if hasattr(bundle, "r_total") else float(bundle)
        samples.setdefault(identity_key(m, grouping), []).append(r)
    out = {}
    for key, xs in samples.items():
        n = len(xs)
        mu = math.fsum(xs) / n
        sigma = math.sqrt(math.fsum((x - mu) ** 2 for x in xs) / n)
        out[key] = StatEntry(mu, sigma, n)
    return out


def advantage(r_total: float, stats: StatEntry, delta: float) -> float:
    return (r_total - stats.mu) / (stats.sigma + delta)


def compute_advantages(batch: GroupBatch, config: TrainConfig) -> GroupStats:
    stats = group_stats(batch.rewards, config.grouping)
    batch.advantages = {
        (i, m): advantage(b.r_total, stats[identity_key(m, config.grouping)], config.delta_stab)
        for (i, m), b in batch.rewards.items()
    }
    return stats


# -- surrogate -----------------------------------------------------------------


def policy_ratio(params: PolicyParams, old_params: PolicyParams, trajectory, agent: AgentId) -> float:
    return math.exp(agent_logprob_sum(params, trajectory, agent) - agent_logprob_sum(old_params, trajectory, agent))


def clipped_term(ratio: float, adv: float, epsilon: float) -> float:
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * adv, clipped * adv)


def _clip_active(ratio: float, adv: float, epsilon: float) -> bool:
    """True when the clipped branch is strictly the smaller one (gradient is zero)."""
    return ratio * adv > min(max(ratio, 1.0 - epsilon), 1.0 + epsilon) * adv


@dataclass
class Term:
    rollout: int
    agent: AgentId
    weight: float
    advantage: float
    ratio: float
    value: float
    clipped: bool
    grad: Gradient


def objective_terms(batch: GroupBatch, params: PolicyParams, config: TrainConfig) -> list[Term]:
    G = batch.G
    eps = config.epsilon_clip
    terms = []
    for i, t in enumerate(batch.trajectories):
        agents = t.agents()
        weight = 1.0 / (G * len(agents))
        for m in agents:
            adv = batch.advantages[(i, m)]
            lp_new, grad = agent_logprob_and_grad(params, t, m)
            if params is batch.old_params:
                lp_old = lp_new
            else:
                lp_old = agent_logprob_sum(batch.old_params, t, m)
            ratio = math.exp(lp_new - lp_old)
            terms.append(
                Term(i, m, weight, adv, ratio, clipped_term(ratio, adv, eps), _clip_active(ratio, adv, eps), grad)
            )
    return terms


def _objective(batch: GroupBatch, terms: list[Term]) -> float:
    per_traj: dict[int, list[float]] = {}
    for term in terms:
        per_traj.setdefault(term.rollout, []).append(term.value)
    return math.fsum(math.fsum(v) / len(v) for v in per_traj.values()) / batch.G


def _gradient(terms: list[Term], params: PolicyParams) -> dict[str, np.ndarray]:
    out = {r: np.zeros_like(params.logits[r]) for r in ROLES}
    for term in terms:
        if term.clipped or term.advantage == 0.0:
            continue
        coef = term.weight * term.ratio * term.advantage
        for (role, b), row in term.grad.items():
            out[role][b] += coef * row
    return out


def sharp_objective(batch: GroupBatch, params: PolicyParams, config: TrainConfig) -> float:
    return _objective(batch, objective_terms(batch, params, config))


def objective_gradient(batch: GroupBatch, params: PolicyParams, config: TrainConfig) -> dict[str, np.ndarray]:
    """Gradient of the surrogate with advantages and old log-probs held fixed."""
    return _gradient(objective_terms(batch, params, config), params)


def objective_and_gradient(batch: GroupBatch, params: PolicyParams, config: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    terms = objective_terms(batch, params, config)
    return _objective(batch, terms), _gradient(terms, params)


# -- parameter updates ---------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam, written for ascent."""

    def __init__(self, params: PolicyParams, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = {r: np.zeros_like(params.logits[r]) for r in ROLES}
        self.v = {r: np.zeros_like(params.logits[r]) for r in ROLES}
        self.t = 0

    def step(self, params: PolicyParams, grad: dict[str, np.ndarray]) -> None:
        self.t += 1
        update = {}
        for r in ROLES:
            self.m[r] = self.b1 * self.m[r] + (1 - self.b1) * grad[r]
            self.v[r] = self.b2 * self.v[r] + (1 - self.b2) * grad[r] ** 2
            mhat = self.m[r] / (1 - self.b1**self.t)
            vhat = self.v[r] / (1 - self.b2**self.t)
            update[r] = self.lr * (mhat / (np.sqrt(vhat) + self.eps) - self.wd * params.logits[r])
        params.apply(update)


class GradientAscent:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: PolicyParams, grad: dict[str, np.ndarray]) -> None:
        params.apply({r: self.lr * grad[r] for r in ROLES})


def make_optimizer(params: PolicyParams, config: TrainConfig):
    if config.optimizer == "adamw":
        return AdamW(params, config.learning_rate, config.adam_betas, config.adam_eps, config.weight_decay)
    return GradientAscent(config.learning_rate)


# -- training loop -------------------------------------------------------------------


RECORD_COLUMNS = ("step", "objective", "success", "planner_credit", "harmful_fraction", "useful_fraction", "replays")


@dataclass(frozen=True)
class StepRow:
    step: int
    objective: float
    success: float
    planner_credit: float
    harmful_fraction: float
    useful_fraction: float
    replays: int


@dataclass
class TrainingRecord:
    rows: list[StepRow] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    params: PolicyParams | None = None

    @property
    def total_replays(self) -> int:
        return sum(r.replays for r in self.rows)


def batch_metrics(batch: GroupBatch, credits: CreditAssignment) -> tuple[float, float, float, float]:
    """Success rate, mean planner credit, harmful and useful worker fractions."""
    success = math.fsum(t.r_acc for t in batch.trajectories) / batch.G
    planner = [b.r_marginal for (i, m), b in batch.rewards.items() if m.role == "planner"]
    worker_credits = [c for (i, m), c in credits.marginal.items() if m.role == "worker"]
    n = len(worker_credits)
    harmful = sum(1 for c in worker_credits if c < 0) / n if n else 0.0
    useful = sum(1 for c in worker_credits if c > 0) / n if n else 0.0
    return success, math.fsum(planner) / len(planner), harmful, useful


def default_queries(spec: FactWorldSpec, seed: int) -> Iterator[QueryInstance]:
    step = 0
    while True:
        yield sample_query(spec, random.Random(derive_seed(seed, "query", step)))
        step += 1


def train(
    env_spec: FactWorldSpec,
    config: TrainConfig,
    queries: Iterable[QueryInstance] | None = None,
    params: PolicyParams | None = None,
    executor: Executor | None = None,
    on_batch: Callable[[int, GroupBatch], None] | None = None,
) -> TrainingRecord:
    """Collect, score, normalize and ascend for ``config.steps`` steps."""
    params = PolicyParams.for_spec(env_spec) if params is None else params.copy()
    optimizer = make_optimizer(params, config)
    stream = iter(queries) if queries is not None else default_queries(env_spec, config.seed)
    record = TrainingRecord(params=params)
    for step in range(config.steps):
        started = time.perf_counter()
        query = next(stream)
        batch = collect_group(env_spec, params, config.G, derive_seed(config.seed, "rollout", step), query, executor)
        credits = score_batch(batch, config.weights, random.Random(derive_seed(config.seed, "sparsify", step)))
        compute_advantages(batch, config)
        objective, grad = objective_and_gradient(batch, batch.old_params, config)
        if not math.isfinite(objective) or abs(objective) > config.divergence_bound:
            raise DivergenceError(step, objective, config.divergence_bound)
        optimizer.step(params, grad)
        success, planner, harmful, useful = batch_metrics(batch, credits)
        record.rows.append(StepRow(step, objective, success, planner, harmful, useful, credits.replays))
        record.seconds.append(time.perf_counter() - started)
        if on_batch is not None:
            on_batch(step, batch)
    return record


def write_record(record: TrainingRecord, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in record.rows:
        w.writerow([r.step, repr(r.objective), repr(r.success), repr(r.planner_credit), repr(r.harmful_fraction), repr(r.useful_fraction), r.replays])


def write_timing(record: TrainingRecord, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("step", "wall_clock_s"))
    for step, s in enumerate(record.seconds):
        w.writerow([step, f"{s:.6f}"])
