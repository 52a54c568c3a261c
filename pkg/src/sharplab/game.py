"""Cooperative games over agent coalitions and their Shapley values.

Coalitions are plain ``int`` bitmasks (bit ``m`` set means agent ``m`` is in
the coalition), which gives a canonical encoding for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

MAX_EXACT_AGENTS = 20
MAX_AXIOM_AGENTS = 12

Coalition = int


class GameError(ValueError):
    pass


class GameFileError(GameError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def coalition(members: Iterable[int]) -> Coalition:
    mask = 0
    for m in members:
        if m < 0:
            raise GameError(f"negative agent index {m}")
        mask |= 1 << m
    return mask


def members_of(mask: Coalition) -> tuple[int, ...]:
    out = []
    m = 0
    while mask:
        if mask & 1:
            out.append(m)
        mask >>= 1
        m += 1
    return tuple(out)


def grand_coalition(n: int) -> Coalition:
    return (1 << n) - 1


@dataclass(eq=False)
class CooperativeGame:
    """A value function over all ``2**n_agents`` coalitions.

    Either ``table`` (dense, indexed by bitmask) or ``evaluator`` must be
    given. Evaluator results are memoized so repeated lookups are free and
    deterministic.
    """

    n_agents: int
    table: np.ndarray | None = None
    evaluator: Callable[[Coalition], float] | None = None
    _memo: dict[int, float] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise GameError("a game needs at least one agent")
        if self.table is None and self.evaluator is None:
            raise GameError("game needs a value table or an evaluator")
        if self.table is not None:
            table = np.asarray(self.table, dtype=float)
            if table.shape != (1 << self.n_agents,):
                raise GameError(
                    f"value table must have {1 << self.n_agents} entries, got {table.shape}"
                )
            table.setflags(write=False)
            self.table = table

    @classmethod
    def from_table(cls, n_agents: int, values: Iterable[float]) -> CooperativeGame:
        return cls(n_agents, table=np.array(list(values), dtype=float))

    @classmethod
    def from_function(cls, n_agents: int, fn: Callable[[Coalition], float]) -> CooperativeGame:
        return cls(n_agents, evaluator=fn)

    @property
    def grand(self) -> Coalition:
        return grand_coalition(self.n_agents)

    def value(self, mask: Coalition) -> float:
        if mask < 0 or mask > self.grand:
            raise GameError(f"coalition {mask} outside {self.n_agents}-agent game")
        if self.table is not None:
            return float(self.table[mask])
        v = self._memo.get(mask)
        if v is None:
            v = float(self.evaluator(mask))
            self._memo[mask] = v
        return v

    def values(self) -> np.ndarray:
        """Dense value table, materializing the evaluator if needed."""
        if self.table is not None:
            return self.table
        if self.n_agents > MAX_EXACT_AGENTS:
            raise GameError(f"refusing to tabulate {self.n_agents} agents")
        return np.array([self.value(s) for s in range(1 << self.n_agents)], dtype=float)


@dataclass(frozen=True)
class ShapleyVector:
    phi: np.ndarray
    stderr: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.phi)

    def __getitem__(self, m: int) -> float:
        return float(self.phi[m])

    def tolist(self) -> list[float]:
        return [float(x) for x in self.phi]


def coalition_weight(coalition_size: int, n: int) -> float:
    """Shapley weight ``|S|! (n - |S| - 1)! / n!`` of a coalition not containing the agent."""
    if n < 1:
        raise GameError("n must be at least 1")
    if not 0 <= coalition_size <= n - 1:
        raise GameError(f"coalition size {coalition_size} invalid for n={n}")
    return 1.0 / (n * math.comb(n - 1, coalition_size))


def _popcounts(n: int) -> np.ndarray:
    idx = np.arange(1 << n, dtype=np.int64)
    counts = np.zeros(1 << n, dtype=np.int64)
    for m in range(n):
        counts += (idx >> m) & 1
    return counts


def shapley_exact(game: CooperativeGame) -> ShapleyVector:
    n = game.n_agents
    if n > MAX_EXACT_AGENTS:
        raise GameError(f"exact Shapley limited to {MAX_EXACT_AGENTS} agents, got {n}")
    v = game.values()
    idx = np.arange(1 << n, dtype=np.int64)
    sizes = _popcounts(n)
    weights = np.array([coalition_weight(s, n) for s in range(n)])
    phi = np.zeros(n)
    for m in range(n):
        without = idx[((idx >> m) & 1) == 0]
        marginal = v[without | (1 << m)] - v[without]
        phi[m] = float(np.dot(weights[sizes[without]], marginal))
    return ShapleyVector(phi)


def shapley_permutation_mc(game: CooperativeGame, samples: int, seed: int) -> ShapleyVector:
    """Permutation-sampling estimate with per-agent standard errors."""
    if samples < 1:
        raise GameError("samples must be >= 1")
    n = game.n_agents
    rng = np.random.default_rng(seed)
    marginals = np.empty((samples, n))
    if n <= MAX_EXACT_AGENTS:
        v = game.values()
        perms = np.argsort(rng.random((samples, n)), axis=1)
        prefix = np.cumsum(np.left_shift(1, perms), axis=1)
        after = v[prefix]
        before = np.concatenate([np.full((samples, 1), v[0]), after[:, :-1]], axis=1)
        np.put_along_axis(marginals, perms, after - before, axis=1)
    else:
        for k in range(samples):
            perm = rng.permutation(n)
            mask = 0
            prev = game.value(0)
            for m in perm:
                mask |= 1 << int(m)
                cur = game.value(mask)
                marginals[k, m] = cur - prev
                prev = cur
    phi = marginals.mean(axis=0)
    if samples > 1:
        stderr = marginals.std(axis=0, ddof=1) / math.sqrt(samples)
    else:
        stderr = np.full(n, np.inf)
    return ShapleyVector(phi, stderr)


def shapley_by_permutations(game: CooperativeGame) -> ShapleyVector:
    """Average marginal contribution over all n! orderings (small n only)."""
    from itertools import permutations

    n = game.n_agents
    if n > 8:
        raise GameError("full permutation enumeration limited to 8 agents")
    totals = [0.0] * n
    count = 0
    for order in permutations(range(n)):
        mask = 0
        prev = game.value(0)
        for m in order:
            mask |= 1 << m
            cur = game.value(mask)
            totals[m] += cur - prev
            prev = cur
        count += 1
    return ShapleyVector(np.array([t / count for t in totals]))


def single_ablation_credit(game: CooperativeGame) -> ShapleyVector:
    """Per-agent grand-coalition marginal ``v(N) - v(N \\ {m})``."""
    full = game.grand
    vn = game.value(full)
    return ShapleyVector(
        np.array([vn - game.value(full & ~(1 << m)) for m in range(game.n_agents)])
    )


@dataclass(frozen=True)
class AxiomReport:
    efficiency: float
    symmetry: float | None
    dummy: float | None
    symmetric_pairs: tuple[tuple[int, int], ...]
    dummies: tuple[int, ...]

    def max_residual(self) -> float:
        vals = [self.efficiency, self.symmetry or 0.0, self.dummy or 0.0]
        return max(vals)


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12)


def detect_symmetric_pairs(game: CooperativeGame) -> list[tuple[int, int]]:
    n = game.n_agents
    v = game.values()
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            bi, bj = 1 << i, 1 << j
            if all(
                _close(v[s | bi], v[s | bj])
                for s in range(1 << n)
                if not s & bi and not s & bj
            ):
                pairs.append((i, j))
    return pairs


def detect_dummies(game: CooperativeGame) -> list[int]:
    n = game.n_agents
    v = game.values()
    out = []
    for m in range(n):
        b = 1 << m
        if all(_close(v[s | b], v[s]) for s in range(1 << n) if not s & b):
            out.append(m)
    return out


def axiom_report(game: CooperativeGame, phi: ShapleyVector) -> AxiomReport:
    if len(phi) != game.n_agents:
        raise GameError("phi length does not match the number of agents")
    values = phi.phi
    eff = abs(math.fsum(values) - (game.value(game.grand) - game.value(0)))
    if game.n_agents > MAX_AXIOM_AGENTS:
        return AxiomReport(eff, None, None, (), ())
    pairs = detect_symmetric_pairs(game)
    dummies = detect_dummies(game)
    sym = max((abs(values[i] - values[j]) for i, j in pairs), default=0.0)
    dum = max((abs(values[m]) for m in dummies), default=0.0)
    return AxiomReport(eff, float(sym), float(dum), tuple(pairs), tuple(dummies))


# -- game file format ------------------------------------------------------
# n=<count>
# <bitmask> <value>     (one line per coalition, all 2**n required)


def parse_game(text: str) -> CooperativeGame:
    n = None
    values: dict[int, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if n is None:
            if not line.startswith("n="):
                raise GameFileError("expected header 'n=<count>'", lineno)
            try:
                n = int(line[2:])
            except ValueError:
                raise GameFileError(f"bad agent count {line[2:]!r}", lineno) from None
            if not 1 <= n <= MAX_EXACT_AGENTS:
                raise GameFileError(f"agent count must be in 1..{MAX_EXACT_AGENTS}", lineno)
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GameFileError("expected '<bitmask> <value>'", lineno)
        try:
            mask = int(parts[0])
            val = float(parts[1])
        except ValueError:
            raise GameFileError(f"cannot parse {line!r}", lineno) from None
        if not 0 <= mask < (1 << n):
            raise GameFileError(f"bitmask {mask} out of range for n={n}", lineno)
        if mask in values:
            raise GameFileError(f"duplicate coalition {mask}", lineno)
        if not math.isfinite(val):
            raise GameFileError(f"non-finite value for coalition {mask}", lineno)
        values[mask] = val
    if n is None:
        raise GameFileError("missing header 'n=<count>'")
    missing = [s for s in range(1 << n) if s not in values]
    if missing:
        raise GameFileError(f"missing {len(missing)} coalition(s), first is {missing[0]}")
    return CooperativeGame.from_table(n, (values[s] for s in range(1 << n)))


def format_game(game: CooperativeGame) -> str:
    v = game.values()
    lines = [f"n={game.n_agents}"]
    lines += [f"{s} {float(v[s])!r}" for s in range(1 << game.n_agents)]
    return "\n".join(lines) + "\n"


def read_game_file(path: str | Path) -> CooperativeGame:
    return parse_game(Path(path).read_text())


def write_game_file(game: CooperativeGame, path: str | Path) -> None:
    Path(path).write_text(format_game(game))
