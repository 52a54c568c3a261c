import io
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from conftest import SURE, random_params, scripted_trajectory
from sharplab.env import TrajectoryLogError, poison_world, sample_query
from sharplab.policy import PolicyParams, agent_logprob_sum
from sharplab.rollout import (
    ConfigError,
    collect_group,
    derive_seed,
    joint_logprob,
    read_batches,
    rollout,
    write_batch,
)


@pytest.fixture
def world():
    return poison_world()


def test_derive_seed_is_stable_and_separates_parts():
    a = derive_seed(0, "rollout", 1)
    assert a == derive_seed(0, "rollout", 1)
    assert len({a, derive_seed(0, "rollout", 2), derive_seed(1, "rollout", 1), derive_seed(0, "query", 1)}) == 4
    assert 0 <= a < 2**64


def test_group_size_below_two_rejected(world):
    params = PolicyParams.for_spec(world)
    for G in (0, 1):
        with pytest.raises(ConfigError):
            collect_group(world, params, G, base_seed=0)


def test_collect_group_is_deterministic(world):
    params = random_params(world, 1)
    a = collect_group(world, params, 8, base_seed=42)
    b = collect_group(world, params, 8, base_seed=42)
    assert a.trajectories == b.trajectories
    assert a.query == b.query
    assert [t.rollout for t in a.trajectories] == list(range(8))


def test_group_rollouts_draw_distinct_streams(world):
    batch = collect_group(world, PolicyParams.for_spec(world), 8, base_seed=3)
    prefixes = {t.rng_trace[:3] for t in batch.trajectories}
    assert len(prefixes) == 8
    assert len({t.query.id for t in batch.trajectories}) == 1


def test_deterministic_policy_gives_identical_group(world):
    params = PolicyParams.for_spec(world)
    # planner always dispatches fetch-0; workers always call noop, which never draws a grant
    params.logits["planner"][:, :] = -50.0
    params.logits["planner"][:, 0] = 50.0
    params.logits["worker"][:, :] = -50.0
    params.logits["worker"][:, 2] = 50.0
    batch = collect_group(world, params, 6, base_seed=0)
    stripped = {replace(t, seed=0, rng_trace=(), rollout=0) for t in batch.trajectories}
    assert len(stripped) == 1
    (t,) = stripped
    assert len(t.planner_trace) == world.planner_turn_budget
    assert all(len(w.calls) == world.worker_step_budget for w in t.worker_traces)
    assert t.r_acc == 0


def test_group_uses_frozen_snapshot(world):
    params = random_params(world, 2)
    batch = collect_group(world, params, 4, base_seed=1)
    assert batch.old_params.frozen and batch.old_params == params
    params.apply({"planner": np.ones_like(params.logits["planner"])})
    assert batch.old_params != params


def test_joint_logprob_sums_agents(spec):
    t = scripted_trajectory(spec, [(0, [(SURE, [0.0])]), (1, [(SURE, [0.0])])])
    params = PolicyParams.for_spec(spec)
    total = joint_logprob(params, t)
    assert total == pytest.approx(math.fsum(agent_logprob_sum(params, t, m) for m in t.agents()), abs=0)
    # planner: 3 uniform steps over 5; each worker: 1 call over 4 tools and a stop over 5
    expected = 3 * math.log(1 / 5) + 2 * (math.log(1 / 4) + math.log(1 / 5))
    assert total == pytest.approx(expected, abs=1e-12)


def test_joint_logprob_rises_with_chosen_logit(spec):
    t = scripted_trajectory(spec, [(0, [(SURE, [0.0])])])
    params = PolicyParams.for_spec(spec)
    prev = joint_logprob(params, t)
    step = t.planner_trace[0]
    for _ in range(5):
        params.logits["planner"][step.bucket, step.action] += 0.5
        cur = joint_logprob(params, t)
        assert cur > prev
        prev = cur
    assert prev < 0


def test_batch_log_round_trip(world, tmp_path):
    params = random_params(world, 3)
    batches = [collect_group(world, params, 4, base_seed=s) for s in range(5)]
    path = tmp_path / "b.jsonl"
    with open(path, "w") as fh:
        for b in batches:
            write_batch(b, fh)
    back = read_batches(path)
    assert [h["query_id"] for h, _ in back] == [b.query.id for b in batches]
    assert [trajs for _, trajs in back] == [b.trajectories for b in batches]
    buf = io.StringIO()
    for b in batches:
        write_batch(b, buf)
    assert buf.getvalue() == path.read_text()


def test_batch_log_rejects_short_group(world, tmp_path):
    batch = collect_group(world, PolicyParams.for_spec(world), 3, base_seed=0)
    buf = io.StringIO()
    write_batch(batch, buf)
    lines = buf.getvalue().splitlines()
    path = tmp_path / "short.jsonl"
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(TrajectoryLogError):
        read_batches(path)
    path.write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(TrajectoryLogError) as exc:
        read_batches(path)
    assert exc.value.line == 1


def test_parallel_rollouts_match_serial(world):
    params = random_params(world, 5)
    serial = collect_group(world, params, 8, base_seed=9)
    with ProcessPoolExecutor(max_workers=2) as ex:
        parallel = collect_group(world, params, 8, base_seed=9, executor=ex)
    assert parallel.trajectories == serial.trajectories


def test_rollout_records_every_draw(world):
    params = random_params(world, 0)
    t = rollout(world, params, sample_query(world, random.Random(0)), 5)
    # every policy action consumes a draw; tool outcomes add more
    assert len(t.rng_trace) >= t.n_actions()
