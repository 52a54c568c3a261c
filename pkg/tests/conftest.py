from __future__ import annotations

import random

import numpy as np
import pytest

from sharplab.env import (
    Answer,
    Dispatch,
    Episode,
    FactWorldSpec,
    QueryInstance,
    SubtaskTemplate,
    ToolAction,
    ToolSpec,
    close_worker,
    planner_step,
    worker,
    worker_tool_call,
)
from sharplab.policy import PolicyParams


class Script:
    """Deterministic stand-in for a draw stream."""

    def __init__(self, draws):
        self.draws = list(draws)
        self.trace = []

    def random(self):
        u = self.draws.pop(0)
        self.trace.append(u)
        return u


def small_spec(required=(0, 1), required_count=None, planner_budget=4, worker_budget=2) -> FactWorldSpec:
    return FactWorldSpec(
        n_facts=3,
        required_facts=required,
        required_count=required_count,
        templates=(
            SubtaskTemplate(name="fetch-0", targets=(0,)),
            SubtaskTemplate(name="fetch-1", targets=(1,)),
            SubtaskTemplate(name="fetch-2", targets=(2,)),
            SubtaskTemplate(name="decoy", targets=()),
        ),
        tools=(
            ToolSpec(name="sure", success=(1.0, 1.0, 1.0)),
            ToolSpec(name="poison", success=(1.0, 1.0, 1.0), corruption=1.0),
            ToolSpec(name="noop", success=(0.0, 0.0, 0.0)),
            ToolSpec(name="coin", success=(0.5, 0.5, 0.5)),
        ),
        planner_turn_budget=planner_budget,
        worker_step_budget=worker_budget,
    )


SURE, POISON, NOOP, COIN = 0, 1, 2, 3


def scripted_trajectory(spec: FactWorldSpec, plan, required=None):
    """Build a trajectory from ``plan``: a list of ``(template, [(tool, draws), ...])``.

    Each worker stops explicitly after its calls when it still has budget.
    The planner answers with the surviving pool at the end.
    """
    required = tuple(spec.required_facts) if required is None else required
    query = QueryInstance(7, required, tuple(t.name for t in spec.templates))
    ep = Episode(spec, query, seed=0)
    for template, calls in plan:
        planner_step(ep, Dispatch(template))
        me = worker(ep.active.slot)
        for tool, draws in calls:
            worker_tool_call(ep, me, ToolAction(tool, spec.templates[template].targets), Script(draws))
        stop = ep.worker_bucket() if len(calls) < spec.worker_step_budget else None
        close_worker(ep, stop)
    if not ep.terminal:
        planner_step(ep, Answer())
    return ep.trajectory()


def random_params(spec: FactWorldSpec, seed: int, scale: float = 1.0) -> PolicyParams:
    params = PolicyParams.for_spec(spec)
    rng = np.random.default_rng(seed)
    params.apply({r: scale * rng.standard_normal(params.logits[r].shape) for r in ("planner", "worker")})
    return params


@pytest.fixture
def spec() -> FactWorldSpec:
    return small_spec()


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


# -- acceptance summary ------------------------------------------------------------

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _acceptance[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in sorted(_acceptance.items()):
        terminalreporter.write_line(f"{status}  {name}")
