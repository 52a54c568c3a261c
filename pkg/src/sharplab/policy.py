"""Shared tabular-softmax policy with one logit table per role.

Both roles live in one :class:`PolicyParams`, but their rows are disjoint, so
a planner update can never move a worker probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .env import AgentId, ContractError, FactWorldSpec, Trajectory, layout, planner_legal, worker_legal

Role = Literal["planner", "worker"]
ROLES: tuple[Role, ...] = ("planner", "worker")
CHECKPOINT_FORMAT = 1

# sparse gradient: (role, bucket) -> gradient row over that row's actions
Gradient = dict[tuple[str, int], np.ndarray]


@dataclass(frozen=True)
class RoleContext:
    role: Role
    bucket: int


class PolicyParams:
    def __init__(self, logits: dict[str, np.ndarray], legal: dict[str, np.ndarray], version: int = 0, frozen: bool = False):
        for role in ROLES:
            if logits[role].shape != legal[role].shape:
                raise ValueError(f"{role} logits and legal mask disagree in shape")
            if not np.all(np.isfinite(logits[role])):
                raise ValueError(f"{role} logits contain non-finite values")
        self.logits = {r: np.array(logits[r], dtype=float) for r in ROLES}
        self.legal = {r: np.array(legal[r], dtype=bool) for r in ROLES}
        self.version = version
        self.frozen = frozen
        if frozen:
            for arr in (*self.logits.values(), *self.legal.values()):
                arr.setflags(write=False)
        self._legal_lists = {r: self.legal[r].tolist() for r in ROLES}

    @classmethod
    def for_spec(cls, spec: FactWorldSpec) -> PolicyParams:
        lay = layout(spec)
        legal = {
            "planner": np.array(planner_legal(spec), dtype=bool),
            "worker": np.array(worker_legal(spec), dtype=bool),
        }
        logits = {
            "planner": np.zeros((lay.planner_buckets, lay.planner_actions)),
            "worker": np.zeros((lay.worker_buckets, lay.worker_actions)),
        }
        return cls(logits, legal)

    def snapshot(self) -> PolicyParams:
        return PolicyParams(self.logits, self.legal, self.version, frozen=True)

    def copy(self) -> PolicyParams:
        return PolicyParams(self.logits, self.legal, self.version)

    def stop_action(self) -> int:
        return self.logits["worker"].shape[1] - 1

    def row(self, role: str, bucket: int) -> list[float]:
        return row_probs(self.logits[role][bucket].tolist(), self._legal_lists[role][bucket])

    def apply(self, update: dict[str, np.ndarray]) -> None:
        if self.frozen:
            raise ContractError("cannot update a frozen snapshot")
        for role, delta in update.items():
            self.logits[role] += delta
        self.version += 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.version == other.version and all(
            np.array_equal(self.logits[r], other.logits[r]) and np.array_equal(self.legal[r], other.legal[r])
            for r in ROLES
        )


def row_probs(logits: Sequence[float], legal: Sequence[bool]) -> list[float]:
    top = max(x for x, ok in zip(logits, legal) if ok)
    ex = [math.exp(x - top) if ok else 0.0 for x, ok in zip(logits, legal)]
    total = math.fsum(ex)
    return [e / total for e in ex]


def action_distribution(params: PolicyParams, ctx: RoleContext) -> np.ndarray:
    table = params.logits.get(ctx.role)
    if table is None:
        raise ContractError(f"unknown role {ctx.role!r}")
    if not 0 <= ctx.bucket < table.shape[0]:
        raise ContractError(f"{ctx.role} bucket {ctx.bucket} out of range 0..{table.shape[0] - 1}")
    return np.array(params.row(ctx.role, ctx.bucket))


def sample_action(dist: Sequence[float], rng) -> int:
    """Inverse-CDF draw; ``rng`` only needs a ``random()`` method."""
    u = rng.random()
    acc = 0.0
    last = -1
    for a, p in enumerate(dist):
        if p <= 0.0:
            continue
        acc += p
        last = a
        if u < acc:
            return a
    # u landed in the rounding gap above the final cumulative sum
    return last


def agent_actions(params: PolicyParams, trajectory: Trajectory, agent: AgentId) -> list[tuple[str, int, int]]:
    """The ``(role, bucket, action)`` steps taken by one agent."""
    if agent.role == "planner":
        if agent.slot != 0:
            raise ContractError("the planner always has slot 0")
        return [("planner", p.bucket, p.action) for p in trajectory.planner_trace]
    if not 1 <= agent.slot <= len(trajectory.worker_traces):
        raise ContractError(f"worker slot {agent.slot} did not participate")
    w = trajectory.worker_traces[agent.slot - 1]
    n_actions = params.logits["worker"].shape[1]
    steps = []
    for c in w.calls:
        if not 0 <= c.tool < n_actions - 1:
            raise ContractError(f"tool {c.tool} is not a policy action")
        steps.append(("worker", c.bucket, c.tool))
    if w.stop_bucket is not None:
        steps.append(("worker", w.stop_bucket, n_actions - 1))
    return steps


def _logprob(params: PolicyParams, role: str, bucket: int, action: int) -> float:
    row = params.logits[role][bucket].tolist()
    legal = params._legal_lists[role][bucket]
    if not legal[action]:
        raise ContractError(f"illegal {role} action {action} in bucket {bucket}")
    top = max(x for x, ok in zip(row, legal) if ok)
    lse = top + math.log(math.fsum(math.exp(x - top) for x, ok in zip(row, legal) if ok))
    return row[action] - lse


def agent_logprob_sum(params: PolicyParams, trajectory: Trajectory, agent: AgentId) -> float:
    return math.fsum(
        _logprob(params, role, b, a) for role, b, a in agent_actions(params, trajectory, agent)
    )


def grad_agent_logprob(params: PolicyParams, trajectory: Trajectory, agent: AgentId) -> Gradient:
    return agent_logprob_and_grad(params, trajectory, agent)[1]


def agent_logprob_and_grad(params: PolicyParams, trajectory: Trajectory, agent: AgentId) -> tuple[float, Gradient]:
    """Both of the above in one pass over the agent's steps."""
    grad: Gradient = {}
    terms = []
    for role, b, a in agent_actions(params, trajectory, agent):
        terms.append(_logprob(params, role, b, a))
        probs = np.array(params.row(role, b))
        g = -probs
        g[a] += 1.0
        key = (role, b)
        grad[key] = grad[key] + g if key in grad else g
    return math.fsum(terms), grad


def densify(grad: Gradient, params: PolicyParams) -> dict[str, np.ndarray]:
    out = {r: np.zeros_like(params.logits[r]) for r in ROLES}
    for (role, b), row in grad.items():
        out[role][b] += row
    return out


# -- checkpoint ---------------------------------------------------------------
# Header lines "key=value", then a CSV table role,bucket,action,legal,logit.


def format_checkpoint(params: PolicyParams) -> str:
    lines = [
        f"format={CHECKPOINT_FORMAT}",
        f"version={params.version}",
    ]
    for role in ROLES:
        rows, cols = params.logits[role].shape
        lines.append(f"shape.{role}={rows}x{cols}")
    lines.append("role,bucket,action,legal,logit")
    for role in ROLES:
        table = params.logits[role]
        legal = params.legal[role]
        for b in range(table.shape[0]):
            for a in range(table.shape[1]):
                lines.append(f"{role},{b},{a},{int(legal[b, a])},{float(table[b, a])!r}")
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> PolicyParams:
    header: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines) and "=" in lines[i] and "," not in lines[i]:
        key, val = lines[i].split("=", 1)
        header[key] = val
        i += 1
    if header.get("format") != str(CHECKPOINT_FORMAT):
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    if i >= len(lines) or lines[i] != "role,bucket,action,legal,logit":
        raise ValueError("missing checkpoint table header")
    logits, legal = {}, {}
    for role in ROLES:
        rows, cols = (int(x) for x in header[f"shape.{role}"].split("x"))
        logits[role] = np.zeros((rows, cols))
        legal[role] = np.zeros((rows, cols), dtype=bool)
    seen = 0
    for lineno, line in enumerate(lines[i + 1 :], start=i + 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 5 or parts[0] not in ROLES:
            raise ValueError(f"line {lineno}: malformed checkpoint row")
        role, b, a = parts[0], int(parts[1]), int(parts[2])
        legal[role][b, a] = parts[3] == "1"
        logits[role][b, a] = float(parts[4])
        seen += 1
    expected = sum(logits[r].size for r in ROLES)
    if seen != expected:
        raise ValueError(f"checkpoint has {seen} rows, expected {expected}")
    return PolicyParams(logits, legal, version=int(header["version"]))


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_text(format_checkpoint(params))


def load_checkpoint(path: str | Path) -> PolicyParams:
    return parse_checkpoint(Path(path).read_text())
