"""Memory-efficient Nash Q-learning for two-player zero-sum Markov games.

The learner keeps optimistic/pessimistic Q and V tables, a UCB/LCB pair,
reference-advantage estimates with their running moments, and one joint
policy per (h, s).  Every table is indexed by (h, s, a, b) or (h, s), so the
memory footprint is O(SABH) no matter how many episodes are played.

All indices are 0-based.  V tables carry an extra all-zero row at ``h = H``
so that ``V[h + 1]`` is valid at the last step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import textio
from .game import MarkovGame, SidePolicy, check_capacity
from .linprog import CCEError, SolverError, _cce_from_rows, cce_rows

Mode = Literal["full", "ucb_only"]


@dataclass(frozen=True)
class LearnerConfig:
    total_episodes: int
    c_b: float = 2.0
    delta: float = 0.01
    mode: Mode = "full"

    def __post_init__(self):
        # c_b = 0 switches every bonus off, which is handy for hand-checked runs
        if not self.c_b >= 0:
            raise ValueError(f"c_b must be non-negative, got {self.c_b}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if int(self.total_episodes) < 1:
            raise ValueError(f"total_episodes must be >= 1, got {self.total_episodes}")
        if self.mode not in ("full", "ucb_only"):
            raise ValueError(f"mode must be 'full' or 'ucb_only', got {self.mode!r}")


def learning_rate(n: int, H: int) -> float:
    """``(H + 1) / (H + n)`` for the n-th visit (n >= 1)."""
    if n < 1:
        raise ValueError(f"visit count must be >= 1, got {n}")
    return (H + 1) / (H + n)


def log_term(S: int, n_joint: int, T: int, delta: float) -> float:
    """``ln(S * |joint actions| * T / delta)`` used by every bonus."""
    return math.log(S * n_joint * T / delta)


def bonus_ucb(n: int, H: int, S: int, A: int, B: int, T: int, delta: float, c_b: float) -> float:
    """Hoeffding-style bonus ``c_b * sqrt(H^3 ln(SABT/delta) / n)``."""
    if n < 1:
        raise ValueError(f"visit count must be >= 1, got {n}")
    return c_b * math.sqrt(H ** 3 * log_term(S, A * B, T, delta) / n)


# (name, per-cell?, initial value as a multiple of H or a constant)
_Q_TABLES = ("q_upper", "q_lower", "q_ucb", "q_lcb", "q_upper_ref", "q_lower_ref")
_ACCUMULATORS = tuple(
    f"{base}_{side}" for side in ("upper", "lower")
    for base in ("phi_r", "psi_r", "phi_a", "psi_a", "bonus_ref", "bonus_delta")
)
_V_TABLES = ("v_upper", "v_lower", "v_upper_ref", "v_lower_ref")


@dataclass(eq=False)
class LearnerState:
    S: int
    A: int
    B: int
    H: int
    config: LearnerConfig
    q_upper: np.ndarray
    q_lower: np.ndarray
    q_ucb: np.ndarray
    q_lcb: np.ndarray
    q_upper_ref: np.ndarray
    q_lower_ref: np.ndarray
    visits: np.ndarray
    phi_r_upper: np.ndarray
    psi_r_upper: np.ndarray
    phi_a_upper: np.ndarray
    psi_a_upper: np.ndarray
    bonus_ref_upper: np.ndarray
    bonus_delta_upper: np.ndarray
    phi_r_lower: np.ndarray
    psi_r_lower: np.ndarray
    phi_a_lower: np.ndarray
    psi_a_lower: np.ndarray
    bonus_ref_lower: np.ndarray
    bonus_delta_lower: np.ndarray
    v_upper: np.ndarray
    v_lower: np.ndarray
    v_upper_ref: np.ndarray
    v_lower_ref: np.ndarray
    unsettled: np.ndarray
    pi: np.ndarray
    episode: int = 0
    # radicands that came out negative from round-off and were clamped to zero
    clamp_count: int = 0
    clamp_max: float = 0.0
    _consts: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        H, S, A, B = self.H, self.S, self.A, self.B
        T = int(self.config.total_episodes) * H
        L = log_term(S, A * B, T, self.config.delta)
        c_b = self.config.c_b
        self._consts = {
            "log": L,
            "iota": c_b * math.sqrt(H ** 3 * L),        # / sqrt(n)
            "bstd": c_b * L,                             # / sqrt(n)
            "sqrtH": math.sqrt(H),
            "bfloor": c_b * H * H * L * L,               # / n^(3/4)
        }

    def tables(self) -> dict[str, np.ndarray]:
        names = _Q_TABLES + ("visits",) + _ACCUMULATORS + _V_TABLES + ("unsettled", "pi")
        return {name: getattr(self, name) for name in names}

    def num_entries(self) -> int:
        """Number of stored scalars; a function of (S, A, B, H) only."""
        return sum(t.size for t in self.tables().values())

    @property
    def settled_fraction(self) -> float:
        return float(1.0 - self.unsettled.mean())

    def value_gap(self, s: int) -> float:
        return float(self.v_upper[0, s] - self.v_lower[0, s])


def init_state(dims: tuple[int, int, int, int], config: LearnerConfig) -> LearnerState:
    """Fresh tables: optimistic side at H, pessimistic side at 0, uniform joint policy."""
    S, A, B, H = (int(d) for d in dims)
    check_capacity(H, S, A, B)
    cell = (H, S, A, B)
    Hf = float(H)
    arrays = {}
    for name in ("q_upper", "q_ucb", "q_upper_ref"):
        arrays[name] = np.full(cell, Hf)
    for name in ("q_lower", "q_lcb", "q_lower_ref") + _ACCUMULATORS:
        arrays[name] = np.zeros(cell)
    arrays["visits"] = np.zeros(cell, dtype=np.int64)
    for name in ("v_upper", "v_upper_ref"):
        v = np.full((H + 1, S), Hf)
        v[H] = 0.0
        arrays[name] = v
    for name in ("v_lower", "v_lower_ref"):
        arrays[name] = np.zeros((H + 1, S))
    arrays["unsettled"] = np.ones((H, S), dtype=bool)
    arrays["pi"] = np.full(cell, 1.0 / (A * B))
    return LearnerState(S, A, B, H, config, **arrays)


# ---------------------------------------------------------------------------
# per-visit updates; all assume visits[h, s, a, b] was already incremented


def update_q(state: LearnerState, h: int, s: int, a: int, b: int, reward: float, next_state: int) -> None:
    idx = (h, s, a, b)
    n = int(state.visits[idx])
    eta = (state.H + 1) / (state.H + n)
    iota = state._consts["iota"] / math.sqrt(n)
    state.q_ucb[idx] = (1 - eta) * state.q_ucb[idx] + eta * (reward + state.v_upper[h + 1, next_state] + iota)
    state.q_lcb[idx] = (1 - eta) * state.q_lcb[idx] + eta * (reward + state.v_lower[h + 1, next_state] - iota)


def update_q_bonus(state: LearnerState, side: str, h: int, s: int, a: int, b: int,
                   next_state: int) -> tuple[float, float]:
    """Refresh the reference moments of one side and return ``(phi_r, b_ref)``.

    ``phi_r`` is the running mean of the next-step reference value and
    ``b_ref`` the exploration bonus for the reference-advantage update.
    """
    idx = (h, s, a, b)
    n = int(state.visits[idx])
    eta = (state.H + 1) / (state.H + n)
    if side == "upper":
        v_ref = state.v_upper_ref[h + 1, next_state]
        v = state.v_upper[h + 1, next_state]
    elif side == "lower":
        v_ref = state.v_lower_ref[h + 1, next_state]
        v = state.v_lower[h + 1, next_state]
    else:
        raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")
    phi_r = getattr(state, f"phi_r_{side}")
    psi_r = getattr(state, f"psi_r_{side}")
    phi_a = getattr(state, f"phi_a_{side}")
    psi_a = getattr(state, f"psi_a_{side}")
    bonus_ref = getattr(state, f"bonus_ref_{side}")
    bonus_delta = getattr(state, f"bonus_delta_{side}")

    w = 1.0 / n
    mean_r = (1 - w) * phi_r[idx] + w * v_ref
    sq_r = (1 - w) * psi_r[idx] + w * v_ref * v_ref
    adv = v - v_ref
    mean_a = (1 - eta) * phi_a[idx] + eta * adv
    sq_a = (1 - eta) * psi_a[idx] + eta * adv * adv
    phi_r[idx], psi_r[idx], phi_a[idx], psi_a[idx] = mean_r, sq_r, mean_a, sq_a

    var_r = sq_r - mean_r * mean_r
    var_a = sq_a - mean_a * mean_a
    if var_r < 0.0 or var_a < 0.0:
        state.clamp_count += 1
        state.clamp_max = max(state.clamp_max, -min(var_r, var_a))
        var_r = max(var_r, 0.0)
        var_a = max(var_a, 0.0)
    c = state._consts
    b_temp = c["bstd"] / math.sqrt(n) * (math.sqrt(var_r) + c["sqrtH"] * math.sqrt(var_a))
    bonus_delta[idx] = b_temp - bonus_ref[idx]
    bonus_ref[idx] = b_temp
    b_ref = b_temp + (1 - eta) * bonus_delta[idx] / eta + c["bfloor"] / n ** 0.75
    return float(mean_r), float(b_ref)


def update_ur(state: LearnerState, h: int, s: int, a: int, b: int, reward: float, next_state: int) -> None:
    idx = (h, s, a, b)
    n = int(state.visits[idx])
    eta = (state.H + 1) / (state.H + n)
    phi_r, b_ref = update_q_bonus(state, "upper", h, s, a, b, next_state)
    target = reward + state.v_upper[h + 1, next_state] - state.v_upper_ref[h + 1, next_state] + phi_r + b_ref
    state.q_upper_ref[idx] = (1 - eta) * state.q_upper_ref[idx] + eta * target


def update_lr(state: LearnerState, h: int, s: int, a: int, b: int, reward: float, next_state: int) -> None:
    idx = (h, s, a, b)
    n = int(state.visits[idx])
    eta = (state.H + 1) / (state.H + n)
    phi_r, b_ref = update_q_bonus(state, "lower", h, s, a, b, next_state)
    target = reward + state.v_lower[h + 1, next_state] - state.v_lower_ref[h + 1, next_state] + phi_r - b_ref
    state.q_lower_ref[idx] = (1 - eta) * state.q_lower_ref[idx] + eta * target


def step_update(state: LearnerState, game: MarkovGame, h: int, s: int, a: int, b: int, next_state: int) -> None:
    """One visit of (h, s, a, b) followed by s' = ``next_state``."""
    idx = (h, s, a, b)
    reward = float(game.rewards[idx])
    state.visits[idx] += 1
    update_q(state, h, s, a, b, reward, next_state)
    if state.config.mode == "full":
        update_ur(state, h, s, a, b, reward, next_state)
        update_lr(state, h, s, a, b, reward, next_state)
        new_up = min(state.q_upper_ref[idx], state.q_ucb[idx])
        new_lo = max(state.q_lower_ref[idx], state.q_lcb[idx])
    else:
        new_up = state.q_ucb[idx]
        new_lo = state.q_lcb[idx]
    q_up = min(new_up, state.q_upper[idx])
    q_lo = max(new_lo, state.q_lower[idx])
    state.q_upper[idx] = q_up
    state.q_lower[idx] = q_lo

    if q_up == new_up and q_lo == new_lo:
        qu = state.q_upper[h, s]
        ql = state.q_lower[h, s]
        try:
            pi = _cce_from_rows(cce_rows(qu, ql), (qu - ql).ravel())
        except (CCEError, SolverError) as exc:
            raise CCEError(f"CCE failed at (k={state.episode + 1}, h={h}, s={s}): {exc}") from exc
        state.pi[h, s] = pi.reshape(state.A, state.B)

    pi_hs = state.pi[h, s]
    state.v_upper[h, s] = min(float((pi_hs * state.q_upper[h, s]).sum()), state.v_upper[h, s])
    state.v_lower[h, s] = max(float((pi_hs * state.q_lower[h, s]).sum()), state.v_lower[h, s])

    if state.config.mode == "full":
        if state.v_upper[h, s] - state.v_lower[h, s] > 1.0:
            state.v_upper_ref[h, s] = state.v_upper[h, s]
            state.v_lower_ref[h, s] = state.v_lower[h, s]
        elif state.unsettled[h, s]:
            state.v_upper_ref[h, s] = state.v_upper[h, s]
            state.v_lower_ref[h, s] = state.v_lower[h, s]
            state.unsettled[h, s] = False


@dataclass
class EpisodeRecord:
    states: list[int]       # s_1 .. s_{H+1}
    actions: list[tuple[int, int]]
    rewards: list[float]
    value_gap: float        # (V_upper - V_lower)(s_1) before the episode's updates


def run_episode(state: LearnerState, game: MarkovGame, rng: np.random.Generator) -> EpisodeRecord:
    """Play one episode from ``game.initial_state`` under the current joint policy, updating as we go."""
    if game.dims != (state.S, state.A, state.B, state.H):
        raise ValueError(f"game dims {game.dims} do not match learner dims {(state.S, state.A, state.B, state.H)}")
    s = game.initial_state
    gap = state.value_gap(s)
    u = rng.random(2 * state.H)
    cum_p = game.cumulative_transitions
    B = state.B
    states, actions, rewards = [s], [], []
    for h in range(state.H):
        cdf = np.cumsum(state.pi[h, s].ravel())
        j = min(int(np.searchsorted(cdf, u[2 * h], side="right")), cdf.size - 1)
        a, b = divmod(j, B)
        nxt = min(int(np.searchsorted(cum_p[h, s, a, b], u[2 * h + 1], side="right")), state.S - 1)
        step_update(state, game, h, s, a, b, nxt)
        actions.append((a, b))
        rewards.append(float(game.rewards[h, s, a, b]))
        states.append(nxt)
        s = nxt
    state.episode += 1
    return EpisodeRecord(states, actions, rewards, gap)


@dataclass(frozen=True)
class MarginalPolicyPair:
    mu: SidePolicy
    nu: SidePolicy


def marginals(pi: np.ndarray) -> MarginalPolicyPair:
    mu = pi.sum(axis=3)
    nu = pi.sum(axis=2)
    return MarginalPolicyPair(SidePolicy(mu / mu.sum(axis=-1, keepdims=True)),
                              SidePolicy(nu / nu.sum(axis=-1, keepdims=True)))


def extract_marginals(state: LearnerState) -> MarginalPolicyPair:
    """Per-player policies obtained by summing the joint policy over the opponent's actions."""
    return marginals(state.pi)


def select_output_episode(gap_history) -> int:
    """0-based index of the smallest value gap; the earliest wins ties."""
    gaps = np.asarray(gap_history, dtype=float)
    if gaps.size == 0:
        raise ValueError("gap history is empty")
    return int(np.argmin(gaps))


# ---------------------------------------------------------------------------
# checkpoints

STATE_KIND = "me_nash_ql_state"


def state_to_text(state: LearnerState, extra_header: dict | None = None,
                  extra_tables: dict | None = None) -> str:
    cfg = state.config
    header = {
        "S": state.S, "A": state.A, "B": state.B, "H": state.H,
        "c_b": repr(float(cfg.c_b)), "delta": repr(float(cfg.delta)),
        "total_episodes": cfg.total_episodes, "mode": cfg.mode,
        "episode": f"{state.episode:{textio.INT_WIDTH}d}",
        "clamp_count": f"{state.clamp_count:{textio.INT_WIDTH}d}",
        "clamp_max": textio.fmt_float(state.clamp_max),
    }
    header.update(extra_header or {})
    tables = dict(state.tables())
    tables.update(extra_tables or {})
    return textio.dumps(STATE_KIND, header, tables)


def state_from_text(text: str) -> tuple[LearnerState, dict, dict]:
    """Inverse of :func:`state_to_text`; also returns any extra header keys and tables."""
    header, tables = textio.loads(text, STATE_KIND)
    cfg = LearnerConfig(int(header.pop("total_episodes")), float(header.pop("c_b")),
                        float(header.pop("delta")), header.pop("mode"))
    dims = [int(header.pop(k)) for k in ("S", "A", "B", "H")]
    own = {name: tables.pop(name) for name in list(init_state(dims, cfg).tables())}
    state = LearnerState(*dims, cfg, **own)
    state.episode = int(header.pop("episode"))
    state.clamp_count = int(header.pop("clamp_count"))
    state.clamp_max = float(header.pop("clamp_max"))
    header.pop("schema_version", None)
    header.pop("kind", None)
    return state, header, tables


def save_state(state: LearnerState, path) -> None:
    Path(path).write_text(state_to_text(state))


def load_state(path) -> LearnerState:
    return state_from_text(Path(path).read_text())[0]
