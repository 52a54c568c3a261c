"""Tripartite rewards: broadcast accuracy, marginal credit, tool process."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .env import PLANNER, AgentId, ContractError, Trajectory, counterfactual_replay, terminal_accuracy
from .game import CooperativeGame
from .rollout import GroupBatch


class RewardWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(default=0.9, ge=0.0)
    beta: float = Field(default=0.9, ge=0.0)
    gamma: float = Field(default=0.1, ge=0.0)
    lambda_planner: float = Field(default=1.0, ge=0.0)
    sparsify_p: float = Field(default=1.0, ge=0.0, le=1.0)


@dataclass(frozen=True)
class RewardBundle:
    r_broadcast: int
    r_marginal: float
    r_tool: float
    r_total: float


def broadcast_reward(batch: GroupBatch) -> dict[tuple[int, AgentId], int]:
    out = {}
    for i, t in enumerate(batch.trajectories):
        acc = terminal_accuracy(t)
        for m in t.agents():
            out[(i, m)] = acc
    return out


def tool_process_reward(trajectory: Trajectory, agent: AgentId) -> float:
    """Mean validity of the agent's tool calls, 0 when it made none."""
    if agent.role == "planner":
        # the planner has no tools in FactWorld
        return 0.0
    if not 1 <= agent.slot <= len(trajectory.worker_traces):
        raise ContractError(f"{agent} did not participate")
    calls = trajectory.worker_traces[agent.slot - 1].calls
    if not calls:
        return 0.0
    return math.fsum(c.validity for c in calls) / len(calls)


def marginal_credit(trajectory: Trajectory, agent: AgentId, game: CooperativeGame | None = None) -> int:
    """``R_acc(tau) - R_acc(tau without agent)``; one counterfactual replay."""
    if agent.role != "worker":
        raise ContractError("marginal_credit is for workers; use planner_credit for the planner")
    if not 1 <= agent.slot <= len(trajectory.worker_traces):
        raise ContractError(f"{agent} did not participate")
    grand = (1 << trajectory.n_agents) - 1
    without = grand & ~(1 << agent.slot)
    if game is not None:
        return int(game.value(grand) - game.value(without))
    return terminal_accuracy(trajectory) - counterfactual_replay(trajectory, without)


def planner_credit(worker_credits: Sequence[float], lambda_planner: float) -> float:
    if not worker_credits:
        return 0.0
    return lambda_planner * math.fsum(max(c, 0) for c in worker_credits) / len(worker_credits)


def aggregate(r_broadcast: float, r_marginal: float, r_tool: float, weights: RewardWeights) -> float:
    return weights.alpha * r_broadcast + weights.beta * r_marginal + weights.gamma * r_tool


@dataclass
class CreditAssignment:
    marginal: dict[tuple[int, AgentId], float] = field(default_factory=dict)
    selected: dict[tuple[int, AgentId], bool] = field(default_factory=dict)
    replays: int = 0


def sparsified_credits(batch: GroupBatch, p: float, rng, lambda_planner: float = 1.0) -> CreditAssignment:
    """Marginal credit for a random ``p``-fraction of worker invocations.

    One selection draw is consumed per invocation whatever ``p`` is, so the
    endpoints reduce exactly to dense credit (``p=1``) and no credit (``p=0``).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    out = CreditAssignment()
    for i, t in enumerate(batch.trajectories):
        credits = []
        for slot in t.worker_set:
            m = AgentId("worker", slot)
            chosen = rng.random() < p
            out.selected[(i, m)] = chosen
            if chosen:
                c = marginal_credit(t, m)
                out.replays += 1
            else:
                c = 0
            out.marginal[(i, m)] = c
            credits.append(c)
        out.marginal[(i, PLANNER)] = planner_credit(credits, lambda_planner)
    return out


def score_batch(batch: GroupBatch, weights: RewardWeights, rng) -> CreditAssignment:
    """Fill ``batch.rewards`` with a :class:`RewardBundle` for every (rollout, agent)."""
    broadcast = broadcast_reward(batch)
    credits = sparsified_credits(batch, weights.sparsify_p, rng, weights.lambda_planner)
    rewards = {}
    for i, t in enumerate(batch.trajectories):
        for m in t.agents():
            rb = broadcast[(i, m)]
            rmc = credits.marginal[(i, m)]
            rt = tool_process_reward(t, m)
            rewards[(i, m)] = RewardBundle(rb, rmc, rt, aggregate(rb, rmc, rt, weights))
    batch.rewards = rewards
    return credits


REWARD_COLUMNS = ("query", "rollout", "role", "slot", "r_broadcast", "r_marginal", "r_tool", "r_total")


def write_reward_table(batches: Sequence[GroupBatch], fh: IO[str], header: bool = True) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(REWARD_COLUMNS)
    for batch in batches:
        for (i, m), b in batch.rewards.items():
            w.writerow(
                [batch.query.id, i, m.role, m.slot, b.r_broadcast, repr(float(b.r_marginal)), repr(b.r_tool), repr(b.r_total)]
            )
