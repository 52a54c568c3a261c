"""FactWorld: a synthetic planner/worker tool environment.

A query asks for a set of required facts. The planner dispatches subtask
templates to fresh worker slots; each worker calls tools (one call per step)
that may grant the template's facts. An optional poison tool can also corrupt
a fact that some earlier call gathered. Every tool outcome is recorded, so the
terminal predicate can be recomputed exactly with any subset of agents masked
out and nothing re-sampled.

Fact sets are carried as sorted tuples on records and as int bitmasks inside
the hot loops.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Literal, NamedTuple, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .game import Coalition, CooperativeGame

LOG_SCHEMA = 1


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


class TrajectoryLogError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


# -- spec -------------------------------------------------------------------


class SubtaskTemplate(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    targets: tuple[int, ...] = ()


class ToolSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    success: tuple[float, ...]
    corruption: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _probabilities(self) -> ToolSpec:
        for p in self.success:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"success probability {p} outside [0, 1]")
        return self


class FactWorldSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_facts: int = Field(ge=1, le=12)
    required_facts: tuple[int, ...]
    required_count: int | None = None
    templates: tuple[SubtaskTemplate, ...]
    tools: tuple[ToolSpec, ...]
    planner_turn_budget: int = Field(ge=1)
    worker_step_budget: int = Field(ge=1)

    @model_validator(mode="after")
    def _consistent(self) -> FactWorldSpec:
        if not self.required_facts:
            raise ValueError("required_facts must be nonempty")
        if len(set(self.required_facts)) != len(self.required_facts):
            raise ValueError("required_facts contains duplicates")
        for f in self.required_facts:
            if not 0 <= f < self.n_facts:
                raise ValueError(f"required fact {f} outside 0..{self.n_facts - 1}")
        if self.required_count is not None and not (
            1 <= self.required_count <= len(self.required_facts)
        ):
            raise ValueError("required_count must be in 1..len(required_facts)")
        if not self.templates:
            raise ValueError("at least one subtask template is needed")
        for t in self.templates:
            for f in t.targets:
                if not 0 <= f < self.n_facts:
                    raise ValueError(f"template {t.name!r} targets unknown fact {f}")
        if not self.tools:
            raise ValueError("at least one tool is needed")
        for tool in self.tools:
            if len(tool.success) != self.n_facts:
                raise ValueError(
                    f"tool {tool.name!r} needs {self.n_facts} success probabilities"
                )
        if sum(1 for tool in self.tools if tool.corruption > 0) > 1:
            raise ValueError("at most one poison tool is allowed")
        return self


class Layout(NamedTuple):
    n_templates: int
    n_tools: int
    planner_actions: int
    worker_actions: int
    planner_buckets: int
    worker_buckets: int
    answer_action: int
    stop_action: int
    template_masks: tuple[int, ...]
    tool_success: tuple[tuple[float, ...], ...]  # [tool][template]
    tool_corruption: tuple[float, ...]


@lru_cache(maxsize=64)
def layout(spec: FactWorldSpec) -> Layout:
    k = len(spec.templates)
    n_tools = len(spec.tools)
    masks = tuple(_mask(t.targets) for t in spec.templates)
    success = []
    for tool in spec.tools:
        row = []
        for t in spec.templates:
            p = 1.0
            for f in sorted(set(t.targets)):
                p *= tool.success[f]
            row.append(p if t.targets else 0.0)
        success.append(tuple(row))
    return Layout(
        n_templates=k,
        n_tools=n_tools,
        planner_actions=k + 1,
        worker_actions=n_tools + 1,
        planner_buckets=spec.planner_turn_budget << spec.n_facts,
        worker_buckets=k * spec.worker_step_budget * 4,
        answer_action=k,
        stop_action=n_tools,
        template_masks=masks,
        tool_success=tuple(success),
        tool_corruption=tuple(tool.corruption for tool in spec.tools),
    )


def planner_legal(spec: FactWorldSpec) -> list[list[bool]]:
    lay = layout(spec)
    return [[True] * lay.planner_actions for _ in range(lay.planner_buckets)]


def worker_legal(spec: FactWorldSpec) -> list[list[bool]]:
    """Every tool is always legal; stopping is illegal before the first call."""
    lay = layout(spec)
    rows = []
    for b in range(lay.worker_buckets):
        step = (b // 4) % spec.worker_step_budget
        rows.append([True] * lay.n_tools + [step > 0])
    return rows


def _mask(facts: Iterable[int]) -> int:
    m = 0
    for f in facts:
        m |= 1 << f
    return m


def _facts(mask: int) -> tuple[int, ...]:
    out = []
    f = 0
    while mask:
        if mask & 1:
            out.append(f)
        mask >>= 1
        f += 1
    return tuple(out)


# -- records ------------------------------------------------------------------


class AgentId(NamedTuple):
    role: Literal["planner", "worker"]
    slot: int


PLANNER = AgentId("planner", 0)


def worker(slot: int) -> AgentId:
    return AgentId("worker", slot)


@dataclass(frozen=True)
class QueryInstance:
    id: int
    required_facts: tuple[int, ...]
    template_menu: tuple[str, ...]


@dataclass(frozen=True)
class Dispatch:
    template: int


@dataclass(frozen=True)
class Answer:
    # None means "report whatever survived in the fact pool"
    facts: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ToolAction:
    tool: int
    args: tuple[int, ...]


@dataclass(frozen=True)
class PlannerStep:
    bucket: int
    action: int


@dataclass(frozen=True)
class ToolCallRecord:
    slot: int
    step: int
    bucket: int
    tool: int
    args: tuple[int, ...]
    success: bool
    granted: tuple[int, ...]
    corrupted: tuple[int, ...]
    validity: float

    @property
    def agent(self) -> AgentId:
        return AgentId("worker", self.slot)


@dataclass(frozen=True)
class WorkerTrace:
    slot: int
    template: int
    calls: tuple[ToolCallRecord, ...]
    # bucket in which the worker chose to stop; None when the step budget ran out
    stop_bucket: int | None


@dataclass(frozen=True)
class Trajectory:
    query: QueryInstance
    planner_trace: tuple[PlannerStep, ...]
    worker_traces: tuple[WorkerTrace, ...]
    terminal_answer: tuple[int, ...]
    answer_mode: Literal["report", "explicit"]
    terminal: bool
    r_acc: int
    seed: int
    rng_trace: tuple[float, ...]
    rollout: int = 0

    @property
    def worker_set(self) -> tuple[int, ...]:
        return tuple(w.slot for w in self.worker_traces)

    @property
    def n_agents(self) -> int:
        return 1 + len(self.worker_traces)

    def agents(self) -> list[AgentId]:
        return [PLANNER] + [AgentId("worker", w.slot) for w in self.worker_traces]

    def n_actions(self) -> int:
        n = len(self.planner_trace)
        for w in self.worker_traces:
            n += len(w.calls) + (w.stop_bucket is not None)
        return n

    def n_tool_calls(self) -> int:
        return sum(len(w.calls) for w in self.worker_traces)


# -- episode state machine --------------------------------------------------


class DrawStream:
    """Uniform draws from a seeded generator, recorded for replay."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)
        self.trace: list[float] = []

    def random(self) -> float:
        u = self._rng.random()
        self.trace.append(u)
        return u


class ReplayDraws:
    """Feeds a recorded draw sequence back in the same order."""

    def __init__(self, trace: Sequence[float]):
        self._it = iter(trace)
        self.trace: list[float] = []

    def random(self) -> float:
        try:
            u = next(self._it)
        except StopIteration:
            raise ContractError("recorded rng trace exhausted during replay") from None
        self.trace.append(u)
        return u


@dataclass
class _ActiveWorker:
    slot: int
    template: int
    calls: list[ToolCallRecord] = field(default_factory=list)


class Episode:
    """Mutable rollout state for one query."""

    def __init__(self, spec: FactWorldSpec, query: QueryInstance, seed: int = 0):
        self.spec = spec
        self.layout = layout(spec)
        self.query = query
        self.required = _mask(query.required_facts)
        self.seed = seed
        self.pool = 0
        self.turns = 0
        self.planner_trace: list[PlannerStep] = []
        self.worker_traces: list[WorkerTrace] = []
        self.active: _ActiveWorker | None = None
        self.terminal = False
        self.answer_mask = 0
        self.answer_mode: Literal["report", "explicit"] = "report"

    def planner_bucket(self) -> int:
        turn = min(self.turns, self.spec.planner_turn_budget - 1)
        return (turn << self.spec.n_facts) | (self.required & ~self.pool)

    def worker_bucket(self) -> int:
        w = self.active
        if w is None:
            raise ContractError("no active worker")
        target = self.layout.template_masks[w.template]
        step = min(len(w.calls), self.spec.worker_step_budget - 1)
        done = 1 if target and (self.pool & target) == target else 0
        at_risk = 1 if self.pool & ~target else 0
        return ((w.template * self.spec.worker_step_budget + step) * 2 + done) * 2 + at_risk

    def force_terminal(self) -> None:
        if self.active is not None:
            close_worker(self)
        self.terminal = True
        self.answer_mode = "report"
        self.answer_mask = self.pool & self.required

    def trajectory(self, rng_trace: Sequence[float] = (), rollout: int = 0) -> Trajectory:
        if self.active is not None:
            raise ContractError("close the active worker before building the trajectory")
        return Trajectory(
            query=self.query,
            planner_trace=tuple(self.planner_trace),
            worker_traces=tuple(self.worker_traces),
            terminal_answer=_facts(self.answer_mask),
            answer_mode=self.answer_mode,
            terminal=self.terminal,
            r_acc=_accuracy(self.required, self.pool, self.answer_mask) if self.terminal else 0,
            seed=self.seed,
            rng_trace=tuple(rng_trace),
            rollout=rollout,
        )


def sample_query(spec: FactWorldSpec, rng: random.Random) -> QueryInstance:
    qid = rng.getrandbits(63)
    if spec.required_count is None:
        required = tuple(sorted(spec.required_facts))
    else:
        required = tuple(sorted(rng.sample(list(spec.required_facts), spec.required_count)))
    return QueryInstance(qid, required, tuple(t.name for t in spec.templates))


def planner_step(ep: Episode, action: Dispatch | Answer, bucket: int | None = None) -> Episode:
    if ep.terminal:
        raise ContractError("episode is already terminal")
    if ep.active is not None:
        raise ContractError("a worker is still running")
    if ep.turns >= ep.spec.planner_turn_budget:
        ep.force_terminal()
        return ep
    if bucket is None:
        bucket = ep.planner_bucket()
    ep.turns += 1
    if isinstance(action, Dispatch):
        if not 0 <= action.template < ep.layout.n_templates:
            raise ContractError(f"unknown template {action.template}")
        ep.planner_trace.append(PlannerStep(bucket, action.template))
        ep.active = _ActiveWorker(slot=len(ep.worker_traces) + 1, template=action.template)
    else:
        ep.planner_trace.append(PlannerStep(bucket, ep.layout.answer_action))
        ep.terminal = True
        if action.facts is None:
            ep.answer_mode = "report"
            ep.answer_mask = ep.pool & ep.required
        else:
            ep.answer_mode = "explicit"
            ep.answer_mask = _mask(action.facts)
    return ep


def worker_tool_call(ep: Episode, agent: AgentId, action: ToolAction, rng, bucket: int | None = None) -> ToolCallRecord:
    w = ep.active
    if w is None or agent != ("worker", w.slot):
        raise ContractError(f"{agent} is not the active worker")
    if len(w.calls) >= ep.spec.worker_step_budget:
        raise ContractError("worker step budget exhausted")
    lay = ep.layout
    if bucket is None:
        bucket = ep.worker_bucket()
    target = lay.template_masks[w.template]
    args = _mask(action.args)
    step = len(w.calls)
    well_formed = 0 <= action.tool < lay.n_tools and args != 0 and args == target
    granted = corrupted = 0
    success = False
    if well_formed:
        success = rng.random() < lay.tool_success[action.tool][w.template]
        if lay.tool_corruption[action.tool] > 0:
            hit = rng.random() < lay.tool_corruption[action.tool]
            if hit and ep.pool:
                choices = _facts(ep.pool)
                corrupted = 1 << choices[int(rng.random() * len(choices))]
        ep.pool &= ~corrupted
        if success:
            granted = target
            ep.pool |= granted
    rec = ToolCallRecord(
        slot=w.slot,
        step=step,
        bucket=bucket,
        tool=action.tool,
        args=tuple(sorted(set(action.args))),
        success=success,
        granted=_facts(granted),
        corrupted=_facts(corrupted),
        validity=1.0 if well_formed and success else 0.0,
    )
    w.calls.append(rec)
    return rec


def close_worker(ep: Episode, stop_bucket: int | None = None) -> WorkerTrace:
    w = ep.active
    if w is None:
        raise ContractError("no active worker")
    trace = WorkerTrace(w.slot, w.template, tuple(w.calls), stop_bucket)
    ep.worker_traces.append(trace)
    ep.active = None
    return trace


# -- terminal predicate and counterfactual replay ---------------------------


def _accuracy(required: int, pool: int, answer: int) -> int:
    return int((pool & required) == required and answer == (pool & required))


def surviving_pool(trajectory: Trajectory, coalition: Coalition | None = None) -> int:
    """Fact pool after applying recorded grants and corruptions in order.

    Records of worker slots outside ``coalition`` (bit t = slot t) are skipped.
    """
    pool = 0
    for w in trajectory.worker_traces:
        if coalition is not None and not (coalition >> w.slot) & 1:
            continue
        for c in w.calls:
            for f in c.corrupted:
                pool &= ~(1 << f)
            for f in c.granted:
                pool |= 1 << f
    return pool


def terminal_accuracy(trajectory: Trajectory) -> int:
    if not trajectory.terminal:
        raise ContractError("terminal_accuracy needs a terminal trajectory")
    required = _mask(trajectory.query.required_facts)
    pool = surviving_pool(trajectory)
    if trajectory.answer_mode == "report":
        answer = pool & required
    else:
        answer = _mask(trajectory.terminal_answer)
    return _accuracy(required, pool, answer)


def counterfactual_replay(trajectory: Trajectory, coalition: Coalition) -> int:
    """Accuracy with every record of agents outside ``coalition`` deleted.

    Agent index 0 is the planner and index t is worker slot t. Recorded
    outcomes of the surviving agents are kept verbatim; without the planner
    the value is 0.
    """
    if not trajectory.terminal:
        raise ContractError("counterfactual replay needs a terminal trajectory")
    if coalition < 0 or coalition >> trajectory.n_agents:
        raise ContractError(f"coalition {coalition} names unknown agent slots")
    if not coalition & 1:
        return 0
    required = _mask(trajectory.query.required_facts)
    pool = surviving_pool(trajectory, coalition)
    if trajectory.answer_mode == "report":
        answer = pool & required
    else:
        answer = _mask(trajectory.terminal_answer)
    return _accuracy(required, pool, answer)


def trajectory_game(trajectory: Trajectory) -> CooperativeGame:
    if not trajectory.terminal:
        raise ContractError("trajectory_game needs a terminal trajectory")
    return CooperativeGame.from_function(
        trajectory.n_agents, lambda s: counterfactual_replay(trajectory, s)
    )


# -- trajectory log -----------------------------------------------------------


def trajectory_to_dict(t: Trajectory) -> dict:
    return {
        "kind": "trajectory",
        "schema": LOG_SCHEMA,
        "query": {
            "id": t.query.id,
            "required": list(t.query.required_facts),
            "menu": list(t.query.template_menu),
        },
        "rollout": t.rollout,
        "seed": t.seed,
        "planner": [[p.bucket, p.action] for p in t.planner_trace],
        "workers": [
            {
                "slot": w.slot,
                "template": w.template,
                "stop": w.stop_bucket,
                "calls": [
                    {
                        "step": c.step,
                        "bucket": c.bucket,
                        "tool": c.tool,
                        "args": list(c.args),
                        "success": c.success,
                        "granted": list(c.granted),
                        "corrupted": list(c.corrupted),
                        "validity": c.validity,
                    }
                    for c in w.calls
                ],
            }
            for w in t.worker_traces
        ],
        "answer": list(t.terminal_answer),
        "answer_mode": t.answer_mode,
        "terminal": t.terminal,
        "r_acc": t.r_acc,
        "rng": list(t.rng_trace),
    }


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _int_list(obj, what: str) -> tuple[int, ...]:
    if not isinstance(obj, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in obj):
        raise ValueError(f"{what} must be a list of integers")
    return tuple(obj)


def _req(d: dict, key: str, typ, what: str):
    if key not in d:
        raise ValueError(f"missing field {what}.{key}")
    val = d[key]
    if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ValueError(f"{what}.{key} must be an integer")
    if typ is not int and not isinstance(val, typ):
        raise ValueError(f"{what}.{key} has the wrong type")
    return val


def trajectory_from_dict(d: dict) -> Trajectory:
    if d.get("kind") != "trajectory":
        raise ValueError("record kind is not 'trajectory'")
    if d.get("schema") != LOG_SCHEMA:
        raise ValueError(f"unsupported schema {d.get('schema')!r}")
    q = _req(d, "query", dict, "trajectory")
    menu = _req(q, "menu", list, "query")
    query = QueryInstance(
        _req(q, "id", int, "query"),
        _int_list(_req(q, "required", list, "query"), "query.required"),
        tuple(str(x) for x in menu),
    )
    planner = []
    for p in _req(d, "planner", list, "trajectory"):
        b, a = _int_list(p, "planner step")
        planner.append(PlannerStep(b, a))
    workers = []
    for w in _req(d, "workers", list, "trajectory"):
        if not isinstance(w, dict):
            raise ValueError("worker entry must be an object")
        slot = _req(w, "slot", int, "worker")
        stop = w.get("stop")
        if stop is not None and (isinstance(stop, bool) or not isinstance(stop, int)):
            raise ValueError("worker.stop must be an integer or null")
        calls = []
        for c in _req(w, "calls", list, "worker"):
            validity = _req(c, "validity", float, "call")
            success = _req(c, "success", bool, "call")
            calls.append(
                ToolCallRecord(
                    slot=slot,
                    step=_req(c, "step", int, "call"),
                    bucket=_req(c, "bucket", int, "call"),
                    tool=_req(c, "tool", int, "call"),
                    args=_int_list(_req(c, "args", list, "call"), "call.args"),
                    success=success,
                    granted=_int_list(_req(c, "granted", list, "call"), "call.granted"),
                    corrupted=_int_list(_req(c, "corrupted", list, "call"), "call.corrupted"),
                    validity=validity,
                )
            )
        workers.append(WorkerTrace(slot, _req(w, "template", int, "worker"), tuple(calls), stop))
    slots = [w.slot for w in workers]
    if slots != list(range(1, len(workers) + 1)):
        raise ValueError(f"worker slots must be 1..{len(workers)} in order, got {slots}")
    mode = _req(d, "answer_mode", str, "trajectory")
    if mode not in ("report", "explicit"):
        raise ValueError(f"unknown answer_mode {mode!r}")
    rng = _req(d, "rng", list, "trajectory")
    if not all(isinstance(u, float) for u in rng):
        raise ValueError("rng must be a list of floats")
    r_acc = _req(d, "r_acc", int, "trajectory")
    if r_acc not in (0, 1):
        raise ValueError("r_acc must be 0 or 1")
    return Trajectory(
        query=query,
        planner_trace=tuple(planner),
        worker_traces=tuple(workers),
        terminal_answer=_int_list(_req(d, "answer", list, "trajectory"), "answer"),
        answer_mode=mode,
        terminal=_req(d, "terminal", bool, "trajectory"),
        r_acc=r_acc,
        seed=_req(d, "seed", int, "trajectory"),
        rng_trace=tuple(rng),
        rollout=_req(d, "rollout", int, "trajectory"),
    )


def dumps_trajectory(t: Trajectory) -> str:
    return dumps_record(trajectory_to_dict(t))


def parse_log(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    """Yield ``(line number, record)`` for every non-blank line."""
    for lineno, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TrajectoryLogError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(rec, dict) or "kind" not in rec:
            raise TrajectoryLogError("record must be an object with a 'kind'", lineno)
        yield lineno, rec


def read_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for lineno, rec in parse_log(fh):
            if rec["kind"] == "batch":
                continue
            try:
                out.append(trajectory_from_dict(rec))
            except (ValueError, TypeError, KeyError) as exc:
                raise TrajectoryLogError(str(exc), lineno) from None
    return out


def write_trajectories(trajectories: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w") as fh:
        for t in trajectories:
            fh.write(dumps_trajectory(t) + "\n")


# -- presets ------------------------------------------------------------------


def pivotal_world() -> FactWorldSpec:
    """Every required fact has exactly one template; no poison."""
    return FactWorldSpec(
        n_facts=3,
        required_facts=(0, 1, 2),
        required_count=2,
        templates=(
            SubtaskTemplate(name="fetch-0", targets=(0,)),
            SubtaskTemplate(name="fetch-1", targets=(1,)),
            SubtaskTemplate(name="fetch-2", targets=(2,)),
            SubtaskTemplate(name="decoy", targets=()),
        ),
        tools=(
            ToolSpec(name="search", success=(0.7, 0.7, 0.7)),
            ToolSpec(name="noop", success=(0.0, 0.0, 0.0)),
        ),
        planner_turn_budget=4,
        worker_step_budget=2,
    )


def poison_world() -> FactWorldSpec:
    """Like :func:`pivotal_world` plus a fast tool that can corrupt earlier facts."""
    return FactWorldSpec(
        n_facts=3,
        required_facts=(0, 1, 2),
        required_count=2,
        templates=(
            SubtaskTemplate(name="fetch-0", targets=(0,)),
            SubtaskTemplate(name="fetch-1", targets=(1,)),
            SubtaskTemplate(name="fetch-2", targets=(2,)),
            SubtaskTemplate(name="decoy", targets=()),
        ),
        tools=(
            ToolSpec(name="search", success=(0.7, 0.7, 0.7)),
            ToolSpec(name="fast", success=(0.95, 0.95, 0.95), corruption=0.5),
            ToolSpec(name="noop", success=(0.0, 0.0, 0.0)),
        ),
        planner_turn_budget=4,
        worker_step_budget=2,
    )


PRESETS = {"pivotal": pivotal_world, "poison": poison_world}
