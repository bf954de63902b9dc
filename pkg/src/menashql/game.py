"""Tabular finite-horizon two-player zero-sum Markov games and exact solvers.

Steps, states and actions are 0-based throughout: step ``h`` runs over
``range(H)`` and the value after the last step is identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import textio
from .linprog import SolverError, matrix_game_value

MAX_TABLE_ENTRIES = 50_000_000
PROB_TOL = 1e-12


class CapacityError(ValueError):
    """Requested dimensions exceed the table size budget."""


@dataclass(frozen=True, eq=False)
class MarkovGame:
    """Immutable game: ``rewards[h, s, a, b]`` in [0, 1], ``transitions[h, s, a, b, s']``.

    The max player picks ``a`` (``A`` actions), the min player picks ``b``.
    """

    rewards: np.ndarray
    transitions: np.ndarray
    initial_state: int = 0

    def __post_init__(self):
        r = np.array(self.rewards, dtype=np.float64)
        p = np.array(self.transitions, dtype=np.float64)
        if r.ndim != 4 or p.ndim != 5 or p.shape[:4] != r.shape or p.shape[4] != r.shape[1]:
            raise ValueError(f"inconsistent shapes: rewards {r.shape}, transitions {p.shape}")
        r.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "initial_state", int(self.initial_state))

    @property
    def H(self) -> int:
        return self.rewards.shape[0]

    @property
    def S(self) -> int:
        return self.rewards.shape[1]

    @property
    def A(self) -> int:
        return self.rewards.shape[2]

    @property
    def B(self) -> int:
        return self.rewards.shape[3]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.S, self.A, self.B, self.H

    @cached_property
    def cumulative_transitions(self) -> np.ndarray:
        c = np.cumsum(self.transitions, axis=-1)
        c.setflags(write=False)
        return c


@dataclass(frozen=True)
class SidePolicy:
    """Markov policy of one player: ``probs[h, s, action]``."""

    probs: np.ndarray

    @classmethod
    def uniform(cls, H: int, S: int, n_actions: int) -> "SidePolicy":
        return cls(np.full((H, S, n_actions), 1.0 / n_actions))


@dataclass(frozen=True, eq=False)
class ExactSolution:
    v_star: np.ndarray           # (H, S)
    q_star: np.ndarray           # (H, S, A, B)
    nash_row_strategy: np.ndarray  # (H, S, A)
    nash_col_strategy: np.ndarray  # (H, S, B)

    @property
    def mu(self) -> SidePolicy:
        return SidePolicy(self.nash_row_strategy)

    @property
    def nu(self) -> SidePolicy:
        return SidePolicy(self.nash_col_strategy)


def check_capacity(*dims: int) -> None:
    total = 1
    for d in dims:
        if d < 1:
            raise ValueError(f"dimensions must be positive, got {dims}")
        total *= int(d)
    if total > MAX_TABLE_ENTRIES:
        raise CapacityError(f"table of {total} entries exceeds the budget of {MAX_TABLE_ENTRIES}")


def validate(game: MarkovGame) -> list[str]:
    """Every invariant violation as a human-readable string; empty when valid."""
    problems = []
    H, S = game.H, game.S
    if not 0 <= game.initial_state < S:
        problems.append(f"initial_state {game.initial_state} outside [0, {S})")
    P, r = game.transitions, game.rewards
    for idx in zip(*np.nonzero(~np.isfinite(r) | (r < 0.0) | (r > 1.0))):
        problems.append(f"reward {float(r[idx]):.15g} at (h,s,a,b)={tuple(int(i) for i in idx)} outside [0, 1]")
    neg = np.any(P < 0.0, axis=-1) | ~np.all(np.isfinite(P), axis=-1)
    for idx in zip(*np.nonzero(neg)):
        problems.append(f"negative or non-finite probability in row (h,s,a,b)={tuple(int(i) for i in idx)}")
    sums = P.sum(axis=-1)
    for idx in zip(*np.nonzero(np.abs(sums - 1.0) > PROB_TOL)):
        problems.append(f"probability row (h,s,a,b)={tuple(int(i) for i in idx)} sums to {float(sums[idx]):.15g}")
    if H < 1 or S < 1 or game.A < 1 or game.B < 1:
        problems.append(f"empty dimension in {game.dims}")
    return problems


def generate_random(seed: int, dims: tuple[int, int, int, int], concentration: float = 1.0,
                    initial_state: int = 0) -> MarkovGame:
    """Random game with uniform rewards and symmetric-Dirichlet transition rows.

    ``dims`` is ``(S, A, B, H)``.  Small ``concentration`` gives peaked,
    near-deterministic dynamics; large values give diffuse ones.
    """
    S, A, B, H = (int(d) for d in dims)
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    check_capacity(H, S, A, B, S)
    rng = np.random.default_rng(seed)
    rewards = rng.random((H, S, A, B))
    P = rng.dirichlet(np.full(S, float(concentration)), size=(H, S, A, B))
    # tiny alphas can underflow a whole row; fall back to a point mass
    bad = ~np.isfinite(P).all(axis=-1) | (P.sum(axis=-1) <= 0)
    if bad.any():
        P[bad] = 0.0
        P[bad, 0] = 1.0
    P /= P.sum(axis=-1, keepdims=True)
    return MarkovGame(rewards, P, initial_state)


def _check_index(game: MarkovGame, h: int, s: int, a: int, b: int) -> None:
    if not (0 <= h < game.H and 0 <= s < game.S and 0 <= a < game.A and 0 <= b < game.B):
        raise IndexError(f"index (h,s,a,b)=({h},{s},{a},{b}) out of range for dims {game.dims}")


def sample_transition(game: MarkovGame, h: int, s: int, a: int, b: int,
                      rng: np.random.Generator) -> tuple[int, float]:
    """Draw ``s' ~ P_h(.|s,a,b)``; the reward is deterministic."""
    _check_index(game, h, s, a, b)
    u = rng.random()
    cdf = game.cumulative_transitions[h, s, a, b]
    nxt = min(int(np.searchsorted(cdf, u, side="right")), game.S - 1)
    return nxt, float(game.rewards[h, s, a, b])


def _lookahead(game: MarkovGame, h: int, v_next: np.ndarray) -> np.ndarray:
    return game.rewards[h] + game.transitions[h] @ v_next


def nash_values(game: MarkovGame) -> ExactSolution:
    """Backward induction with a matrix-game LP at every (h, s)."""
    H, S, A, B = game.H, game.S, game.A, game.B
    v = np.zeros((H + 1, S))
    q = np.zeros((H, S, A, B))
    x = np.zeros((H, S, A))
    y = np.zeros((H, S, B))
    for h in reversed(range(H)):
        q[h] = _lookahead(game, h, v[h + 1])
        for s in range(S):
            try:
                v[h, s], x[h, s], y[h, s] = matrix_game_value(q[h, s])
            except SolverError as exc:
                raise SolverError(f"matrix game at (h={h}, s={s}): {exc}") from exc
    return ExactSolution(v[:H], q, x, y)


def _check_policy(game: MarkovGame, policy: SidePolicy, n_actions: int, who: str) -> np.ndarray:
    probs = np.asarray(policy.probs, dtype=float)
    if probs.shape != (game.H, game.S, n_actions):
        raise ValueError(f"{who} policy has shape {probs.shape}, expected {(game.H, game.S, n_actions)}")
    return probs


def best_response_values(game: MarkovGame, opponent: SidePolicy, side: str) -> np.ndarray:
    """Values ``V[h, s]`` of the best response of ``side`` against the other player's fixed policy.

    ``side="max"`` takes the min player's policy and returns V^{dagger,nu};
    ``side="min"`` takes the max player's policy and returns V^{mu,dagger}.
    """
    H, S = game.H, game.S
    if side == "max":
        nu = _check_policy(game, opponent, game.B, "min-player")
    elif side == "min":
        mu = _check_policy(game, opponent, game.A, "max-player")
    else:
        raise ValueError(f"side must be 'max' or 'min', got {side!r}")
    v = np.zeros((H + 1, S))
    for h in reversed(range(H)):
        q = _lookahead(game, h, v[h + 1])
        if side == "max":
            v[h] = np.einsum("sab,sb->sa", q, nu[h]).max(axis=1)
        else:
            v[h] = np.einsum("sab,sa->sb", q, mu[h]).min(axis=1)
    return v[:H]


def policy_values(game: MarkovGame, mu: SidePolicy, nu: SidePolicy) -> np.ndarray:
    """``V^{mu,nu}[h, s]`` by plain policy evaluation."""
    m = _check_policy(game, mu, game.A, "max-player")
    n = _check_policy(game, nu, game.B, "min-player")
    v = np.zeros((game.H + 1, game.S))
    for h in reversed(range(game.H)):
        q = _lookahead(game, h, v[h + 1])
        v[h] = np.einsum("sab,sa,sb->s", q, m[h], n[h])
    return v[:game.H]


def nash_gap(game: MarkovGame, mu: SidePolicy, nu: SidePolicy) -> float:
    """``V^{dagger,nu}_1(s1) - V^{mu,dagger}_1(s1)``, with round-off below 1e-9 reported as 0."""
    s1 = game.initial_state
    gap = float(best_response_values(game, nu, "max")[0, s1] - best_response_values(game, mu, "min")[0, s1])
    if -1e-9 < gap < 0.0:
        gap = 0.0
    return gap


# ---------------------------------------------------------------------------
# persistence

GAME_KIND = "markov_game"


def dumps_game(game: MarkovGame) -> str:
    header = {"S": game.S, "A": game.A, "B": game.B, "H": game.H, "initial_state": game.initial_state}
    return textio.dumps(GAME_KIND, header, {"rewards": game.rewards, "transitions": game.transitions})


def loads_game(text: str) -> MarkovGame:
    header, tables = textio.loads(text, GAME_KIND)
    game = MarkovGame(tables["rewards"], tables["transitions"], int(header["initial_state"]))
    expected = tuple(int(header[k]) for k in ("S", "A", "B", "H"))
    if game.dims != expected:
        raise textio.FormatError(f"header dims {expected} disagree with table shapes {game.dims}")
    return game


def save_game(game: MarkovGame, path) -> None:
    Path(path).write_text(dumps_game(game))


def load_game(path) -> MarkovGame:
    return loads_game(Path(path).read_text())
