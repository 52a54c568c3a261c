import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SURE, random_params, scripted_trajectory
from sharplab.env import (
    PLANNER,
    ContractError,
    PlannerStep,
    QueryInstance,
    Trajectory,
    dumps_trajectory,
    layout,
    poison_world,
    sample_query,
    worker,
)
from sharplab.policy import (
    PolicyParams,
    RoleContext,
    action_distribution,
    agent_actions,
    agent_logprob_and_grad,
    agent_logprob_sum,
    densify,
    format_checkpoint,
    grad_agent_logprob,
    load_checkpoint,
    parse_checkpoint,
    sample_action,
    save_checkpoint,
)
from sharplab.rollout import rollout


def _walk_logprob(params, record, role, slot):
    """Log-prob of one agent's recorded actions, read straight off the log record."""
    total = 0.0
    steps = []
    if role == "planner":
        steps = [("planner", b, a) for b, a in record["planner"]]
    else:
        w = record["workers"][slot - 1]
        stop = params.logits["worker"].shape[1] - 1
        steps = [("worker", c["bucket"], c["tool"]) for c in w["calls"]]
        if w["stop"] is not None:
            steps.append(("worker", w["stop"], stop))
    for r, b, a in steps:
        logits = params.logits[r][b]
        legal = params.legal[r][b]
        z = np.log(np.sum(np.exp(logits[legal] - logits[legal].max()))) + logits[legal].max()
        total += logits[a] - z
    return total


@pytest.fixture
def world():
    return poison_world()


def test_zero_params_give_uniform_rows(world):
    params = PolicyParams.for_spec(world)
    lay = layout(world)
    dist = action_distribution(params, RoleContext("planner", 0))
    assert dist.tolist() == [1 / lay.planner_actions] * lay.planner_actions
    # stop is illegal at step 0, so the first worker row spreads over the tools only
    first = action_distribution(params, RoleContext("worker", 0))
    assert first[-1] == 0.0
    assert first[:-1].tolist() == pytest.approx([1 / lay.n_tools] * lay.n_tools)


def test_log_two_logit_gives_two_to_one(world):
    params = PolicyParams.for_spec(world)
    params.logits["planner"][5, 0] = math.log(2)
    row = params.row("planner", 5)
    k = len(row)
    assert row[0] == pytest.approx(2 / (k + 1), abs=1e-15)
    assert row[1] == pytest.approx(1 / (k + 1), abs=1e-15)


def test_two_action_row(spec):
    legal = {"planner": np.ones((1, 2), bool), "worker": np.ones((1, 2), bool)}
    params = PolicyParams({"planner": np.array([[math.log(2), 0.0]]), "worker": np.zeros((1, 2))}, legal)
    assert params.row("planner", 0) == pytest.approx([2 / 3, 1 / 3], abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 30))
def test_rows_are_normalized_over_legal_actions(seed, scale):
    world = poison_world()
    params = random_params(world, seed, scale)
    for role in ("planner", "worker"):
        for b in range(0, params.logits[role].shape[0], 7):
            row = np.array(params.row(role, b))
            assert abs(row.sum() - 1.0) <= 1e-12
            assert np.all(row[~params.legal[role][b]] == 0.0)
            assert np.all(row >= 0)


def test_bad_context_raises(world):
    params = PolicyParams.for_spec(world)
    with pytest.raises(ContractError):
        action_distribution(params, RoleContext("critic", 0))
    with pytest.raises(ContractError):
        action_distribution(params, RoleContext("planner", 10_000))


def test_sampling_frequencies_match_distribution():
    rng = random.Random(3)
    n = 100_000
    counts = [0] * 4
    for _ in range(n):
        counts[sample_action([0.25] * 4, rng)] += 1
    for c in counts:
        assert abs(c / n - 0.25) <= 0.005


def test_sampling_never_returns_zero_probability_action():
    class Top:
        def random(self):
            return 1.0 - 1e-17

    assert sample_action([0.5, 0.5 - 1e-12, 0.0], Top()) == 1


def test_uniform_three_step_logprob(spec):
    # planner: dispatch then answer, each uniform over 5 actions
    # worker: first call over the 4 tools (stop illegal), second over all 5
    t = scripted_trajectory(spec, [(0, [(SURE, [0.0]), (SURE, [0.0])])])
    params = PolicyParams.for_spec(spec)
    assert agent_logprob_sum(params, t, PLANNER) == pytest.approx(2 * math.log(1 / 5), abs=1e-12)
    assert agent_logprob_sum(params, t, worker(1)) == pytest.approx(math.log(1 / 4) + math.log(1 / 5), abs=1e-12)


def test_three_quarter_steps():
    legal = {"planner": np.ones((3, 4), bool), "worker": np.ones((1, 2), bool)}
    params = PolicyParams({"planner": np.zeros((3, 4)), "worker": np.zeros((1, 2))}, legal)
    t = Trajectory(
        query=QueryInstance(1, (0,), ("a",)),
        planner_trace=(PlannerStep(0, 1), PlannerStep(1, 2), PlannerStep(2, 3)),
        worker_traces=(),
        terminal_answer=(),
        answer_mode="explicit",
        terminal=True,
        r_acc=0,
        seed=0,
        rng_trace=(),
    )
    assert agent_logprob_sum(params, t, PLANNER) == pytest.approx(3 * math.log(1 / 4), abs=1e-12)


def test_deterministic_policy_has_zero_logprob(spec):
    params = PolicyParams.for_spec(spec)
    t = scripted_trajectory(spec, [(0, [(SURE, [0.0]), (SURE, [0.0])])])
    for b, a in [(p.bucket, p.action) for p in t.planner_trace]:
        params.logits["planner"][b, a] = 800.0
    for c in t.worker_traces[0].calls:
        params.logits["worker"][c.bucket, c.tool] = 800.0
    assert agent_logprob_sum(params, t, PLANNER) == 0.0
    assert agent_logprob_sum(params, t, worker(1)) == 0.0


def test_logprob_matches_independent_log_walker(world):
    params = random_params(world, 4, 1.5)
    for s in range(200):
        t = rollout(world, params, sample_query(world, random.Random(s)), s)
        rec = json.loads(dumps_trajectory(t))
        for m in t.agents():
            assert agent_logprob_sum(params, t, m) == pytest.approx(_walk_logprob(params, rec, m.role, m.slot), abs=1e-10)


def test_unknown_agent_raises(spec):
    t = scripted_trajectory(spec, [(0, [(SURE, [0.0])])])
    with pytest.raises(ContractError):
        agent_logprob_sum(PolicyParams.for_spec(spec), t, worker(2))


# -- gradients -----------------------------------------------------------------


def test_gradient_is_one_hot_minus_probs(spec):
    params = random_params(spec, 1)
    t = scripted_trajectory(spec, [(2, [(SURE, [0.0])])])
    grad = grad_agent_logprob(params, t, worker(1))
    c = t.worker_traces[0].calls[0]
    row = grad[("worker", c.bucket)]
    expected = -np.array(params.row("worker", c.bucket))
    expected[c.tool] += 1
    np.testing.assert_allclose(row, expected, atol=1e-15)
    assert abs(row.sum()) <= 1e-12


def test_gradient_only_touches_visited_rows(world):
    params = random_params(world, 2)
    t = rollout(world, params, sample_query(world, random.Random(0)), 11)
    for m in t.agents():
        dense = densify(grad_agent_logprob(params, t, m), params)
        other = "worker" if m.role == "planner" else "planner"
        assert not dense[other].any()
        visited = {b for r, b, _ in agent_actions(params, t, m)}
        nonzero = set(np.nonzero(np.abs(dense[m.role]).sum(axis=1))[0].tolist())
        assert nonzero <= visited


def test_gradient_matches_finite_differences(world):
    params = random_params(world, 9, 0.7)
    h = 1e-5
    checked = 0
    for s in range(30):
        t = rollout(world, params, sample_query(world, random.Random(s)), s)
        for m in t.agents():
            lp, grad = agent_logprob_and_grad(params, t, m)
            assert lp == agent_logprob_sum(params, t, m)
            for (role, b), row in grad.items():
                for a in range(row.shape[0]):
                    if not params.legal[role][b, a]:
                        continue
                    plus, minus = params.copy(), params.copy()
                    plus.logits[role][b, a] += h
                    minus.logits[role][b, a] -= h
                    fd = (agent_logprob_sum(plus, t, m) - agent_logprob_sum(minus, t, m)) / (2 * h)
                    assert abs(fd - row[a]) <= 1e-4 * max(1.0, abs(row[a]))
                    checked += 1
    assert checked > 100


# -- parameter handling -----------------------------------------------------------------


def test_role_tables_are_isolated(world):
    params = PolicyParams.for_spec(world)
    before = [params.row("worker", b) for b in range(params.logits["worker"].shape[0])]
    params.apply({"planner": np.full_like(params.logits["planner"], 3.0)})
    params.logits["planner"][0, 0] += 5
    after = [params.row("worker", b) for b in range(params.logits["worker"].shape[0])]
    assert before == after
    assert params.version == 1


def test_snapshot_is_immutable(world):
    params = random_params(world, 0)
    snap = params.snapshot()
    with pytest.raises(ContractError):
        snap.apply({"planner": np.ones_like(snap.logits["planner"])})
    with pytest.raises(ValueError):
        snap.logits["planner"][0, 0] = 1.0
    params.apply({"planner": np.ones_like(params.logits["planner"])})
    assert not np.array_equal(snap.logits["planner"], params.logits["planner"])


def test_non_finite_logits_rejected(world):
    params = PolicyParams.for_spec(world)
    bad = {r: params.logits[r].copy() for r in params.logits}
    bad["planner"][0, 0] = np.nan
    with pytest.raises(ValueError):
        PolicyParams(bad, params.legal)


def test_checkpoint_round_trip_is_exact(world, tmp_path):
    params = random_params(world, 6, 3.3)
    params.version = 17
    path = tmp_path / "ck.csv"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert back == params
    assert format_checkpoint(back) == path.read_text()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda s: s.replace("format=1", "format=2"),
        lambda s: s.replace("role,bucket,action,legal,logit", "r,b"),
        lambda s: "\n".join(s.splitlines()[:-1]) + "\n",
        lambda s: s + "critic,0,0,1,0.0\n",
    ],
)
def test_checkpoint_rejects_corruption(world, mutate):
    text = format_checkpoint(PolicyParams.for_spec(world))
    with pytest.raises(ValueError):
        parse_checkpoint(mutate(text))
