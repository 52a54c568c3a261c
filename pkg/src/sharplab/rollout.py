"""Group rollouts under a frozen policy snapshot."""

from __future__ import annotations

import hashlib
import math
import random
from concurrent.futures import Executor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

from .env import (
    LOG_SCHEMA,
    AgentId,
    Answer,
    Dispatch,
    DrawStream,
    Episode,
    FactWorldSpec,
    QueryInstance,
    ReplayDraws,
    ToolAction,
    Trajectory,
    TrajectoryLogError,
    close_worker,
    dumps_record,
    dumps_trajectory,
    parse_log,
    planner_step,
    sample_query,
    trajectory_from_dict,
    worker,
    worker_tool_call,
)
from .policy import PolicyParams, agent_logprob_sum, sample_action


class ConfigError(ValueError):
    pass


def derive_seed(base_seed: int, *parts: object) -> int:
    """Keyed 64-bit hash of ``parts`` under ``base_seed``."""
    key = (base_seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8, key=key)
    return int.from_bytes(h.digest(), "little")


def rollout(
    spec: FactWorldSpec,
    params: PolicyParams,
    query: QueryInstance,
    seed: int,
    index: int = 0,
    draws=None,
) -> Trajectory:
    """Run one planner loop to termination, dispatching workers as chosen."""
    if draws is None:
        draws = DrawStream(seed)
    ep = Episode(spec, query, seed)
    lay = ep.layout
    templates = spec.templates
    while not ep.terminal:
        if ep.turns >= spec.planner_turn_budget:
            ep.force_terminal()
            break
        b = ep.planner_bucket()
        a = sample_action(params.row("planner", b), draws)
        if a == lay.answer_action:
            planner_step(ep, Answer(), b)
            continue
        planner_step(ep, Dispatch(a), b)
        me = worker(ep.active.slot)
        targets = templates[a].targets
        stop_bucket = None
        for _ in range(spec.worker_step_budget):
            wb = ep.worker_bucket()
            wa = sample_action(params.row("worker", wb), draws)
            if wa == lay.stop_action:
                stop_bucket = wb
                break
            worker_tool_call(ep, me, ToolAction(wa, targets), draws, wb)
        close_worker(ep, stop_bucket)
    return ep.trajectory(draws.trace, index)


def replay_rollout(spec: FactWorldSpec, params: PolicyParams, trajectory: Trajectory) -> Trajectory:
    """Re-run a rollout from its recorded draws."""
    return rollout(
        spec,
        params,
        trajectory.query,
        trajectory.seed,
        trajectory.rollout,
        draws=ReplayDraws(trajectory.rng_trace),
    )


def _rollout_job(args) -> Trajectory:
    return rollout(*args)


@dataclass
class GroupBatch:
    query: QueryInstance
    trajectories: list[Trajectory]
    old_params: PolicyParams
    base_seed: int
    # filled by reward.score_batch, keyed by (rollout index, agent)
    rewards: dict[tuple[int, AgentId], object] = field(default_factory=dict)
    # filled by optim.compute_advantages
    advantages: dict[tuple[int, AgentId], float] = field(default_factory=dict)

    @property
    def G(self) -> int:
        return len(self.trajectories)

    def pairs(self) -> list[tuple[int, AgentId]]:
        return [(i, m) for i, t in enumerate(self.trajectories) for m in t.agents()]


def collect_group(
    env_spec: FactWorldSpec,
    params: PolicyParams,
    G: int,
    base_seed: int,
    query: QueryInstance | None = None,
    executor: Executor | None = None,
) -> GroupBatch:
    if G < 2:
        raise ConfigError(f"group size G must be >= 2, got {G}")
    old = params if params.frozen else params.snapshot()
    if query is None:
        query = sample_query(env_spec, random.Random(derive_seed(base_seed, "query")))
    jobs = [(env_spec, old, query, derive_seed(base_seed, query.id, i), i) for i in range(G)]
    if executor is None:
        trajectories = [_rollout_job(j) for j in jobs]
    else:
        trajectories = list(executor.map(_rollout_job, jobs))
    return GroupBatch(query, trajectories, old, base_seed)


def joint_logprob(params: PolicyParams, trajectory: Trajectory) -> float:
    return math.fsum(agent_logprob_sum(params, trajectory, m) for m in trajectory.agents())


# -- batch log ------------------------------------------------------------------


def batch_header(batch: GroupBatch) -> dict:
    return {
        "kind": "batch",
        "schema": LOG_SCHEMA,
        "query_id": batch.query.id,
        "G": batch.G,
        "params_version": batch.old_params.version,
        "base_seed": batch.base_seed,
    }


def write_batch(batch: GroupBatch, fh: IO[str]) -> None:
    fh.write(dumps_record(batch_header(batch)) + "\n")
    for t in batch.trajectories:
        fh.write(dumps_trajectory(t) + "\n")


def read_batches(path: str | Path) -> list[tuple[dict, list[Trajectory]]]:
    """Group a batch log into ``(header, trajectories)`` pairs."""
    out: list[tuple[dict, list[Trajectory]]] = []
    with open(path) as fh:
        for lineno, rec in parse_log(fh):
            if rec["kind"] == "batch":
                for key in ("query_id", "G", "params_version", "base_seed"):
                    if not isinstance(rec.get(key), int):
                        raise TrajectoryLogError(f"batch header field {key!r} missing or not an integer", lineno)
                out.append((rec, []))
                continue
            if not out:
                raise TrajectoryLogError("trajectory before any batch header", lineno)
            try:
                t = trajectory_from_dict(rec)
            except (ValueError, TypeError, KeyError) as exc:
                raise TrajectoryLogError(str(exc), lineno) from None
            if t.query.id != out[-1][0]["query_id"]:
                raise TrajectoryLogError("trajectory query id does not match its batch header", lineno)
            out[-1][1].append(t)
    for header, trajs in out:
        if len(trajs) != header["G"]:
            raise TrajectoryLogError(f"batch for query {header['query_id']} has {len(trajs)} trajectories, header says {header['G']}")
    return out


def iter_trajectories(batches: Iterable[GroupBatch]) -> Iterable[Trajectory]:
    for b in batches:
        yield from b.trajectories
