"""Shapley-value credit assignment over coalition games.

Coalitions are encoded as integer bitmasks: player ``i`` (0-based) belongs to
``S`` when bit ``i`` of ``S`` is set.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .errors import ConfigError, CounterfactualUnavailableError, GameSizeError

EXACT_CAP = 20
EXACT_WARN = 12
LOCAL_CAP = 12


def popcount(masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks, dtype=np.int64)
    out = np.zeros(masks.shape, dtype=np.int64)
    m = masks.copy()
    while np.any(m):
        out += m & 1
        m >>= 1
    return out


def mask_of(players) -> int:
    m = 0
    for p in players:
        m |= 1 << int(p)
    return m


def members(mask: int):
    return frozenset(i for i in range(mask.bit_length()) if mask >> i & 1)


@dataclass
class CoalitionGame:
    """A value oracle ``v`` over coalitions of ``n_players``.

    ``value`` receives a bitmask.  Results are memoized so every coalition is
    evaluated at most once; ``calls`` counts distinct oracle evaluations.
    """

    n_players: int
    value: Callable[[int], float]
    pure: bool = True
    calls: int = 0
    _memo: Dict[int, float] = field(default_factory=dict, repr=False)

    def __call__(self, mask: int) -> float:
        mask = int(mask)
        if mask in self._memo:
            return self._memo[mask]
        v = float(self.value(mask))
        self.calls += 1
        self._memo[mask] = v
        return v

    def v(self, players) -> float:
        return self(mask_of(players))

    @classmethod
    def from_table(cls, values: Sequence[float]) -> "CoalitionGame":
        values = np.asarray(values, dtype=float)
        n = int(round(math.log2(len(values))))
        if 1 << n != len(values):
            raise ValueError("table length must be a power of two")
        return cls(n, lambda m: values[m])

    @classmethod
    def from_set_function(cls, n: int, fn: Callable[[frozenset], float]) -> "CoalitionGame":
        return cls(n, lambda m: fn(members(m)))

    def table(self) -> np.ndarray:
        return np.array([self(m) for m in range(1 << self.n_players)])


@dataclass
class ShapleyAllocation:
    phi: np.ndarray
    method: str  # "exact", "monte-carlo(M)" or "factorized"
    standard_errors: np.ndarray
    oracle_calls: int = 0

    def to_json(self) -> dict:
        se = [None if not np.isfinite(s) else float(s) for s in self.standard_errors]
        return {
            "phi": [float(p) for p in self.phi],
            "method": self.method,
            "standard_errors": se,
            "oracle_calls": int(self.oracle_calls),
        }


# ---------------------------------------------------------------------------
# exact


@lru_cache(maxsize=32)
def _size_weights(n: int) -> np.ndarray:
    """``w[s] = s! (n - s - 1)! / n!`` for ``s = 0..n-1``."""
    return np.array(
        [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    )


@lru_cache(maxsize=16)
def shapley_matrix(n: int) -> np.ndarray:
    """Linear map ``C`` (n, 2^n) with ``phi = C @ v`` for a value table ``v``."""
    if n > EXACT_WARN:
        raise GameSizeError(f"coefficient matrix for {n} players is too large; use shapley_exact")
    masks = np.arange(1 << n)
    size = popcount(masks)
    w = _size_weights(n)
    C = np.zeros((n, 1 << n))
    for i in range(n):
        has = (masks >> i) & 1 == 1
        C[i, has] = w[size[has] - 1]
        C[i, ~has] = -w[size[~has]]
    C.setflags(write=False)
    return C


def shapley_from_table(values: np.ndarray) -> np.ndarray:
    """Exact Shapley values from a table (..., 2^n) indexed by bitmask."""
    values = np.asarray(values, dtype=float)
    n = int(round(math.log2(values.shape[-1])))
    if n <= EXACT_WARN:
        return values @ shapley_matrix(n).T
    masks = np.arange(1 << n)
    size = popcount(masks)
    w = _size_weights(n)
    phi = np.zeros(values.shape[:-1] + (n,))
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        marg = values[..., without | (1 << i)] - values[..., without]
        phi[..., i] = marg @ w[size[without]]
    return phi


def shapley_exact(game: CoalitionGame) -> ShapleyAllocation:
    n = game.n_players
    if n > EXACT_CAP:
        raise GameSizeError(
            f"exact Shapley over {n} players needs 2^{n} evaluations (cap {EXACT_CAP}); "
            "use shapley_mc instead"
        )
    if n > EXACT_WARN:
        warnings.warn(f"exact Shapley over {n} players queries {1 << n} coalitions", RuntimeWarning)
    before = game.calls
    phi = shapley_from_table(game.table())
    return ShapleyAllocation(phi, "exact", np.zeros(n), game.calls - before)


# ---------------------------------------------------------------------------
# Monte Carlo


def permutation_prefixes(n: int, M: int, rng: np.random.Generator):
    """Sample ``M`` permutations and return them with their prefix masks.

    ``prefix[m, k]`` is the coalition formed by the first ``k`` players of
    permutation ``m`` (so ``prefix[:, 0] == 0`` and ``prefix[:, n]`` is full).
    """
    perms = np.argsort(rng.random((M, n)), axis=1)
    bits = np.left_shift(1, perms).astype(np.int64)
    prefix = np.zeros((M, n + 1), dtype=np.int64)
    prefix[:, 1:] = np.cumsum(bits, axis=1)
    return perms, prefix


def mc_marginals(perms: np.ndarray, prefix_values: np.ndarray) -> np.ndarray:
    """Per-permutation marginal contributions, shape (M, n), indexed by player."""
    steps = np.diff(prefix_values, axis=-1)
    out = np.empty_like(steps)
    np.put_along_axis(out, perms, steps, axis=-1)
    return out


def _mean_se(samples: np.ndarray):
    M = samples.shape[0]
    mean = samples.mean(axis=0)
    if M < 2:
        return mean, np.full(mean.shape, np.nan)
    return mean, samples.std(axis=0, ddof=1) / math.sqrt(M)


def shapley_mc(game: CoalitionGame, M: int, rng: np.random.Generator) -> ShapleyAllocation:
    """Permutation-sampling estimate; standard errors are NaN when ``M == 1``."""
    if M < 1:
        raise ValueError("M must be at least 1")
    n = game.n_players
    before = game.calls
    perms, prefix = permutation_prefixes(n, M, rng)
    vals = np.array([[game(m) for m in row] for row in prefix])
    samples = mc_marginals(perms, vals)
    mean, se = _mean_se(samples)
    return ShapleyAllocation(mean, f"monte-carlo({M})", se, game.calls - before)


# ---------------------------------------------------------------------------
# factorized


def local_members(i: int, neighborhood) -> list:
    """Player order of agent ``i``'s local game: sorted ``N_i ∪ {i}``."""
    return sorted(set(int(j) for j in neighborhood) | {int(i)})


def shapley_factorized(neighborhoods, local_games: Sequence[CoalitionGame]) -> ShapleyAllocation:
    """Each player's exact Shapley value inside its own local game.

    Local game ``i`` ranges over ``local_members(i, neighborhoods[i])`` in that
    order.  The result carries no global efficiency guarantee.
    """
    n = len(neighborhoods)
    phi = np.zeros(n)
    calls = 0
    for i in range(n):
        mem = local_members(i, neighborhoods[i])
        game = local_games[i]
        if len(mem) > LOCAL_CAP:
            raise GameSizeError(f"local game of player {i} has {len(mem)} players (cap {LOCAL_CAP})")
        if game.n_players != len(mem):
            raise ValueError(f"local game {i} has {game.n_players} players, expected {len(mem)}")
        before = game.calls
        phi[i] = shapley_from_table(game.table())[mem.index(i)]
        calls += game.calls - before
    return ShapleyAllocation(phi, "factorized", np.zeros(n), calls)


# ---------------------------------------------------------------------------
# counterfactual games


def counterfactual_value(snapshot, joint_action, subset, baseline=None) -> float:
    """One-step reward when agents in ``subset`` act and the rest take the baseline.

    ``snapshot`` must expose ``reward_of(actions)`` that re-steps a frozen copy
    of the environment with fixed random draws.  The default baseline is the
    zero control.
    """
    if snapshot is None:
        raise CounterfactualUnavailableError("no environment snapshot to re-step")
    u = np.asarray(joint_action, dtype=float)
    base = np.zeros_like(u) if baseline is None else np.asarray(baseline, dtype=float)
    mask = mask_of(subset) if not isinstance(subset, (int, np.integer)) else int(subset)
    sel = np.array([(mask >> i) & 1 for i in range(len(u))], dtype=bool)
    mixed = np.where(sel.reshape((-1,) + (1,) * (u.ndim - 1)), u, base)
    return float(snapshot.reward_of(mixed))


def counterfactual_game(snapshot, joint_action, baseline=None) -> CoalitionGame:
    n = len(joint_action)
    return CoalitionGame(
        n, lambda m: counterfactual_value(snapshot, joint_action, m, baseline), pure=False
    )


def uniform_split(total: float, n: int) -> ShapleyAllocation:
    return ShapleyAllocation(np.full(n, total / n), "uniform", np.zeros(n), 0)


# ---------------------------------------------------------------------------
# JSON games


def _parse_mask(key: str) -> int:
    key = key.strip()
    if key.startswith(("0b", "0B")):
        return int(key, 2)
    return int(key, 10)


def game_from_json(obj: dict, require_complete: bool = True) -> CoalitionGame:
    """``{"n": N, "values": {mask: value}}``; masks are decimal or ``0b`` strings.

    With ``require_complete`` every one of the ``2^N`` coalitions must be
    present; otherwise querying an absent coalition raises ConfigError.
    """
    try:
        n = int(obj["n"])
        raw = obj["values"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"game JSON needs integer 'n' and object 'values': {exc}") from None
    if n < 1:
        raise ConfigError("game must have at least one player")
    if n > EXACT_CAP:
        raise GameSizeError(f"{n} players exceeds the exact cap {EXACT_CAP}")
    table = np.full(1 << n, np.nan)
    for k, v in raw.items():
        try:
            m = _parse_mask(k)
        except ValueError:
            raise ConfigError(f"bad coalition key {k!r}") from None
        if not 0 <= m < 1 << n:
            raise ConfigError(f"coalition {k!r} outside 0..{(1 << n) - 1}")
        table[m] = float(v)
    missing = np.flatnonzero(np.isnan(table))
    if len(missing) and require_complete:
        shown = ", ".join(str(int(m)) for m in missing[:64])
        more = f" and {len(missing) - 64} more" if len(missing) > 64 else ""
        raise ConfigError(f"missing values for {len(missing)} coalitions: {shown}{more}")
    if not len(missing):
        return CoalitionGame.from_table(table)

    def value(m):
        v = table[int(m)]
        if np.isnan(v):
            raise ConfigError(f"missing value for coalition {int(m)}")
        return float(v)

    return CoalitionGame(n, value)


def game_to_json(game: CoalitionGame) -> dict:
    return {"n": game.n_players, "values": {str(m): v for m, v in enumerate(game.table())}}
