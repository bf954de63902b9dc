"""Multi-player general-sum extension: learner over joint actions plus CCE-gap oracles.

Joint actions are stored flattened in row-major order over
``action_counts = (A_1, ..., A_m)``.  Each player keeps its own copy of every
table the two-player learner uses; visit counts and the correlated joint
policy are shared.  Per-player updates are vectorized over the player axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import textio
from .learner import LearnerConfig, log_term
from .linprog import CCEError, SolverError, _cce_from_rows, cce_rows_multi, deviation_index

MAX_JOINT_TABLE = 10_000_000


class CapacityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GeneralSumGame:
    """``rewards[i, h, s, a_1, ..., a_m]`` in [0, 1]; ``transitions[h, s, a_1, ..., a_m, s']``."""

    rewards: np.ndarray
    transitions: np.ndarray
    initial_state: int = 0

    def __post_init__(self):
        r = np.array(self.rewards, dtype=np.float64)
        p = np.array(self.transitions, dtype=np.float64)
        m = r.shape[0]
        if r.ndim != m + 3 or p.shape != r.shape[1:] + (r.shape[2],):
            raise ValueError(f"inconsistent shapes: rewards {r.shape}, transitions {p.shape}")
        r.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "initial_state", int(self.initial_state))

    @property
    def num_players(self) -> int:
        return self.rewards.shape[0]

    @property
    def H(self) -> int:
        return self.rewards.shape[1]

    @property
    def S(self) -> int:
        return self.rewards.shape[2]

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(self.rewards.shape[3:])

    @property
    def num_joint(self) -> int:
        return int(np.prod(self.action_counts))

    @cached_property
    def rewards_flat(self) -> np.ndarray:
        return self.rewards.reshape(self.num_players, self.H, self.S, self.num_joint)

    @cached_property
    def transitions_flat(self) -> np.ndarray:
        return self.transitions.reshape(self.H, self.S, self.num_joint, self.S)

    @cached_property
    def cumulative_transitions(self) -> np.ndarray:
        return np.cumsum(self.transitions_flat, axis=-1)


@dataclass(frozen=True)
class CorrelatedPolicy:
    """``probs[h, s, a_1, ..., a_m]``: one joint distribution per (h, s)."""

    probs: np.ndarray


def check_capacity(S: int, H: int, action_counts) -> None:
    total = S * H * int(np.prod(action_counts))
    if total > MAX_JOINT_TABLE:
        raise CapacityError(f"{total} entries per table exceeds the budget of {MAX_JOINT_TABLE}")


def validate_general(game: GeneralSumGame) -> list[str]:
    problems = []
    r, P = game.rewards, game.transitions
    if np.any(~np.isfinite(r) | (r < 0) | (r > 1)):
        problems.append("rewards outside [0, 1]")
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        problems.append("negative or non-finite transition probabilities")
    bad = np.abs(P.sum(axis=-1) - 1.0) > 1e-12
    for idx in zip(*np.nonzero(bad)):
        problems.append(f"probability row {tuple(int(i) for i in idx)} does not sum to 1")
    if not 0 <= game.initial_state < game.S:
        problems.append(f"initial_state {game.initial_state} out of range")
    return problems


def generate_random_general(seed: int, S: int, action_counts, H: int, concentration: float = 1.0,
                            initial_state: int = 0) -> GeneralSumGame:
    action_counts = tuple(int(a) for a in action_counts)
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    check_capacity(S, H, action_counts)
    m = len(action_counts)
    rng = np.random.default_rng(seed)
    rewards = rng.random((m, H, S) + action_counts)
    P = rng.dirichlet(np.full(S, float(concentration)), size=(H, S) + action_counts)
    bad = ~np.isfinite(P).all(axis=-1) | (P.sum(axis=-1) <= 0)
    if bad.any():
        P[bad] = 0.0
        P[bad, 0] = 1.0
    P /= P.sum(axis=-1, keepdims=True)
    return GeneralSumGame(rewards, P, initial_state)


def zero_sum_embedding(game) -> GeneralSumGame:
    """Two-player general-sum copy of a zero-sum game: r_1 = r, r_2 = 1 - r."""
    r = np.stack([game.rewards, 1.0 - game.rewards])
    return GeneralSumGame(r, game.transitions, game.initial_state)


# ---------------------------------------------------------------------------
# evaluation oracles


def _policy_array(game: GeneralSumGame, pi) -> np.ndarray:
    probs = np.asarray(pi.probs if isinstance(pi, CorrelatedPolicy) else pi, dtype=float)
    expected = (game.H, game.S) + game.action_counts
    if probs.shape != expected:
        raise ValueError(f"policy has shape {probs.shape}, expected {expected}")
    return probs


def joint_policy_values(game: GeneralSumGame, pi) -> np.ndarray:
    """``V^pi_i[i, h, s]`` for every player."""
    probs = _policy_array(game, pi).reshape(game.H, game.S, game.num_joint)
    m, H, S = game.num_players, game.H, game.S
    v = np.zeros((m, H + 1, S))
    P, r = game.transitions_flat, game.rewards_flat
    for h in reversed(range(H)):
        q = r[:, h] + np.einsum("sjt,it->isj", P[h], v[:, h + 1])
        v[:, h] = (q * probs[h][None]).sum(axis=-1)
    return v[:, :H]


def best_response_value_i(game: GeneralSumGame, pi, i: int) -> np.ndarray:
    """``V^{dagger, pi_-i}_i[h, s]``: player i best-responds to the others' marginal of ``pi``."""
    probs = _policy_array(game, pi)
    if not 0 <= i < game.num_players:
        raise ValueError(f"player {i} out of range")
    H, S = game.H, game.S
    axis = 1 + i  # action axis of player i inside a per-(h) slice (s, a_1..a_m)
    v = np.zeros((H + 1, S))
    for h in reversed(range(H)):
        q = game.rewards[i, h] + game.transitions[h] @ v[h + 1]       # (S, A_1..A_m)
        others = probs[h].sum(axis=axis, keepdims=True)                # (S, .., 1, ..)
        weighted = q * others
        sum_axes = tuple(ax for ax in range(1, q.ndim) if ax != axis)
        qi = weighted.sum(axis=sum_axes) if sum_axes else weighted     # (S, A_i)
        v[h] = qi.max(axis=1)
    return v[:H]


def per_player_gaps(game: GeneralSumGame, pi) -> np.ndarray:
    """``V^{dagger,pi_-i}_{1,i}(s1) - V^pi_{1,i}(s1)`` for each player."""
    s1 = game.initial_state
    vals = joint_policy_values(game, pi)[:, 0, s1]
    br = np.array([best_response_value_i(game, pi, i)[0, s1] for i in range(game.num_players)])
    return br - vals


def cce_gap(game: GeneralSumGame, pi) -> float:
    """Largest unilateral gain at s1; round-off below 1e-9 is reported as 0."""
    gap = float(per_player_gaps(game, pi).max())
    if -1e-9 < gap < 0.0:
        gap = 0.0
    return gap


# ---------------------------------------------------------------------------
# learner

_PLAYER_CELL = ("q_upper", "q_lower", "q_ucb", "q_lcb", "q_upper_ref", "q_lower_ref") + tuple(
    f"{base}_{side}" for side in ("upper", "lower")
    for base in ("phi_r", "psi_r", "phi_a", "psi_a", "bonus_ref", "bonus_delta")
)
_PLAYER_V = ("v_upper", "v_lower", "v_upper_ref", "v_lower_ref")


class MultiLearnerState:
    """All per-player tables as arrays with a leading player axis."""

    def __init__(self, S: int, action_counts, H: int, config: LearnerConfig):
        self.S, self.H = int(S), int(H)
        self.action_counts = tuple(int(a) for a in action_counts)
        self.m = len(self.action_counts)
        self.J = int(np.prod(self.action_counts))
        check_capacity(self.S, self.H, self.action_counts)
        self.config = config
        m, H_, S_, J = self.m, self.H, self.S, self.J
        cell = (m, H_, S_, J)
        for name in _PLAYER_CELL:
            setattr(self, name, np.zeros(cell))
        for name in ("q_upper", "q_ucb", "q_upper_ref"):
            getattr(self, name)[:] = H_
        for name in _PLAYER_V:
            setattr(self, name, np.zeros((m, H_ + 1, S_)))
        self.v_upper[:, :H_] = H_
        self.v_upper_ref[:, :H_] = H_
        self.visits = np.zeros((H_, S_, J), dtype=np.int64)
        self.unsettled = np.ones((m, H_, S_), dtype=bool)
        self.pi = np.full((H_, S_, J), 1.0 / J)
        self.episode = 0
        self.clamp_count = 0
        self.clamp_max = 0.0
        self._dev = deviation_index(self.action_counts)
        T = config.total_episodes * H_
        L = log_term(S_, J, T, config.delta)
        self._iota = config.c_b * math.sqrt(H_ ** 3 * L)
        self._bstd = config.c_b * L
        self._bfloor = config.c_b * H_ * H_ * L * L

    def tables(self) -> dict[str, np.ndarray]:
        names = _PLAYER_CELL + ("visits",) + _PLAYER_V + ("unsettled", "pi")
        return {name: getattr(self, name) for name in names}

    def num_entries(self) -> int:
        return sum(t.size for t in self.tables().values())

    @property
    def settled_fraction(self) -> float:
        return float(1.0 - self.unsettled.mean())

    def correlated_policy(self) -> CorrelatedPolicy:
        return CorrelatedPolicy(self.pi.reshape((self.H, self.S) + self.action_counts).copy())

    def value_gaps(self, s: int) -> np.ndarray:
        return self.v_upper[:, 0, s] - self.v_lower[:, 0, s]


def init_multi(S: int, action_counts, H: int, config: LearnerConfig) -> MultiLearnerState:
    return MultiLearnerState(S, action_counts, H, config)


def _bonus_side(st: MultiLearnerState, side: str, h, s, j, nxt, n, eta):
    v_ref = getattr(st, f"v_{side}_ref")[:, h + 1, nxt]
    v = getattr(st, f"v_{side}")[:, h + 1, nxt]
    phi_r = getattr(st, f"phi_r_{side}")
    psi_r = getattr(st, f"psi_r_{side}")
    phi_a = getattr(st, f"phi_a_{side}")
    psi_a = getattr(st, f"psi_a_{side}")
    bref = getattr(st, f"bonus_ref_{side}")
    bdel = getattr(st, f"bonus_delta_{side}")
    w = 1.0 / n
    mean_r = (1 - w) * phi_r[:, h, s, j] + w * v_ref
    sq_r = (1 - w) * psi_r[:, h, s, j] + w * v_ref * v_ref
    adv = v - v_ref
    mean_a = (1 - eta) * phi_a[:, h, s, j] + eta * adv
    sq_a = (1 - eta) * psi_a[:, h, s, j] + eta * adv * adv
    phi_r[:, h, s, j] = mean_r
    psi_r[:, h, s, j] = sq_r
    phi_a[:, h, s, j] = mean_a
    psi_a[:, h, s, j] = sq_a
    var_r = sq_r - mean_r * mean_r
    var_a = sq_a - mean_a * mean_a
    worst = min(var_r.min(), var_a.min())
    if worst < 0.0:
        st.clamp_count += 1
        st.clamp_max = max(st.clamp_max, -worst)
    b_temp = st._bstd / math.sqrt(n) * (np.sqrt(np.maximum(var_r, 0.0))
                                        + math.sqrt(st.H) * np.sqrt(np.maximum(var_a, 0.0)))
    bdel[:, h, s, j] = b_temp - bref[:, h, s, j]
    bref[:, h, s, j] = b_temp
    b_ref = b_temp + (1 - eta) * bdel[:, h, s, j] / eta + st._bfloor / n ** 0.75
    return v, v_ref, mean_r, b_ref


def step_update_multi(st: MultiLearnerState, game: GeneralSumGame, h: int, s: int, j: int, nxt: int) -> None:
    """Visit of joint action ``j`` (flat index) at (h, s) with next state ``nxt``, for all players."""
    st.visits[h, s, j] += 1
    n = int(st.visits[h, s, j])
    eta = (st.H + 1) / (st.H + n)
    r = game.rewards_flat[:, h, s, j]
    iota = st._iota / math.sqrt(n)
    st.q_ucb[:, h, s, j] = (1 - eta) * st.q_ucb[:, h, s, j] + eta * (r + st.v_upper[:, h + 1, nxt] + iota)
    st.q_lcb[:, h, s, j] = (1 - eta) * st.q_lcb[:, h, s, j] + eta * (r + st.v_lower[:, h + 1, nxt] - iota)
    full = st.config.mode == "full"
    if full:
        v, v_ref, phi, b = _bonus_side(st, "upper", h, s, j, nxt, n, eta)
        st.q_upper_ref[:, h, s, j] = (1 - eta) * st.q_upper_ref[:, h, s, j] + eta * (r + v - v_ref + phi + b)
        v, v_ref, phi, b = _bonus_side(st, "lower", h, s, j, nxt, n, eta)
        st.q_lower_ref[:, h, s, j] = (1 - eta) * st.q_lower_ref[:, h, s, j] + eta * (r + v - v_ref + phi - b)
        new_up = np.minimum(st.q_upper_ref[:, h, s, j], st.q_ucb[:, h, s, j])
        new_lo = np.maximum(st.q_lower_ref[:, h, s, j], st.q_lcb[:, h, s, j])
    else:
        new_up = st.q_ucb[:, h, s, j].copy()
        new_lo = st.q_lcb[:, h, s, j].copy()
    q_up = np.minimum(new_up, st.q_upper[:, h, s, j])
    q_lo = np.maximum(new_lo, st.q_lower[:, h, s, j])
    st.q_upper[:, h, s, j] = q_up
    st.q_lower[:, h, s, j] = q_lo

    # refresh the joint policy only when every player's fresh estimate won
    if np.all(q_up == new_up) and np.all(q_lo == new_lo):
        qu = st.q_upper[:, h, s]
        ql = st.q_lower[:, h, s]
        try:
            G = cce_rows_multi(qu, st.action_counts, st._dev)
            st.pi[h, s] = _cce_from_rows(G, (qu - ql).sum(axis=0))
        except (CCEError, SolverError) as exc:
            raise CCEError(f"CCE failed at (k={st.episode + 1}, h={h}, s={s}, players=all): {exc}") from exc

    pi_hs = st.pi[h, s]
    st.v_upper[:, h, s] = np.minimum(st.q_upper[:, h, s] @ pi_hs, st.v_upper[:, h, s])
    st.v_lower[:, h, s] = np.maximum(st.q_lower[:, h, s] @ pi_hs, st.v_lower[:, h, s])

    if full:
        wide = st.v_upper[:, h, s] - st.v_lower[:, h, s] > 1.0
        settle_now = ~wide & st.unsettled[:, h, s]
        refresh = wide | settle_now
        st.v_upper_ref[refresh, h, s] = st.v_upper[refresh, h, s]
        st.v_lower_ref[refresh, h, s] = st.v_lower[refresh, h, s]
        st.unsettled[settle_now, h, s] = False


@dataclass
class MultiEpisodeRecord:
    states: list[int]
    joint_actions: list[tuple[int, ...]]
    value_gaps: np.ndarray   # per-player (V_upper - V_lower)(s_1) before the episode


def run_episode_multi(st: MultiLearnerState, game: GeneralSumGame, rng: np.random.Generator) -> MultiEpisodeRecord:
    if (game.S, game.H, game.action_counts) != (st.S, st.H, st.action_counts):
        raise ValueError("game dimensions do not match the learner state")
    s = game.initial_state
    gaps = st.value_gaps(s).copy()
    u = rng.random(2 * st.H)
    cum_p = game.cumulative_transitions
    states, joint = [s], []
    for h in range(st.H):
        cdf = np.cumsum(st.pi[h, s])
        j = min(int(np.searchsorted(cdf, u[2 * h], side="right")), st.J - 1)
        nxt = min(int(np.searchsorted(cum_p[h, s, j], u[2 * h + 1], side="right")), st.S - 1)
        step_update_multi(st, game, h, s, j, nxt)
        joint.append(tuple(int(x) for x in np.unravel_index(j, st.action_counts)))
        states.append(nxt)
        s = nxt
    st.episode += 1
    return MultiEpisodeRecord(states, joint, gaps)


# ---------------------------------------------------------------------------
# persistence (player-indexed sections)

GAME_KIND = "general_sum_game"
STATE_KIND = "multi_me_nash_ql_state"


def dumps_general_game(game: GeneralSumGame) -> str:
    header = {"num_players": game.num_players, "S": game.S, "H": game.H,
              "action_counts": ",".join(map(str, game.action_counts)), "initial_state": game.initial_state}
    tables = {f"rewards.p{i}": game.rewards[i] for i in range(game.num_players)}
    tables["transitions"] = game.transitions
    return textio.dumps(GAME_KIND, header, tables)


def loads_general_game(text: str) -> GeneralSumGame:
    header, tables = textio.loads(text, GAME_KIND)
    m = int(header["num_players"])
    rewards = np.stack([tables[f"rewards.p{i}"] for i in range(m)])
    return GeneralSumGame(rewards, tables["transitions"], int(header["initial_state"]))


def multi_state_to_text(st: MultiLearnerState, extra_header: dict | None = None,
                        extra_tables: dict | None = None) -> str:
    cfg = st.config
    header = {"S": st.S, "H": st.H, "action_counts": ",".join(map(str, st.action_counts)),
              "c_b": repr(float(cfg.c_b)), "delta": repr(float(cfg.delta)),
              "total_episodes": cfg.total_episodes, "mode": cfg.mode,
              "episode": f"{st.episode:{textio.INT_WIDTH}d}",
              "clamp_count": f"{st.clamp_count:{textio.INT_WIDTH}d}",
              "clamp_max": textio.fmt_float(st.clamp_max)}
    header.update(extra_header or {})
    tables = {}
    for name, arr in st.tables().items():
        if name in _PLAYER_CELL or name in _PLAYER_V or name == "unsettled":
            for i in range(st.m):
                tables[f"{name}.p{i}"] = arr[i]
        else:
            tables[name] = arr
    tables.update(extra_tables or {})
    return textio.dumps(STATE_KIND, header, tables)


def multi_state_parts(text: str) -> tuple[MultiLearnerState, dict, dict]:
    """Inverse of :func:`multi_state_to_text`; also returns any extra header keys and tables."""
    header, tables = textio.loads(text, STATE_KIND)
    cfg = LearnerConfig(int(header.pop("total_episodes")), float(header.pop("c_b")),
                        float(header.pop("delta")), header.pop("mode"))
    counts = tuple(int(a) for a in header.pop("action_counts").split(","))
    st = MultiLearnerState(int(header.pop("S")), counts, int(header.pop("H")), cfg)
    for name, arr in st.tables().items():
        if name in _PLAYER_CELL or name in _PLAYER_V or name == "unsettled":
            arr[:] = np.stack([tables.pop(f"{name}.p{i}") for i in range(st.m)])
        else:
            arr[:] = tables.pop(name)
    st.episode = int(header.pop("episode"))
    st.clamp_count = int(header.pop("clamp_count"))
    st.clamp_max = float(header.pop("clamp_max"))
    header.pop("schema_version", None)
    header.pop("kind", None)
    return st, header, tables


def multi_state_from_text(text: str) -> MultiLearnerState:
    return multi_state_parts(text)[0]


def save_multi_state(st: MultiLearnerState, path) -> None:
    Path(path).write_text(multi_state_to_text(st))


def load_multi_state(path) -> MultiLearnerState:
    return multi_state_from_text(Path(path).read_text())
