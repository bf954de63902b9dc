"""Metrics, theory oracles and invariant checkers used by the harness and the tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .game import ExactSolution
from .learner import LearnerState, learning_rate

CSV_HEADER = ("episode", "samples", "value_gap_s1", "cum_value_gap", "nash_gap", "settled_fraction")


# ---------------------------------------------------------------------------
# learning-rate weights


def eta_weight(n: int, N: int, H: int) -> float:
    """Weight of the n-th visit after N visits under ``eta_n = (H+1)/(H+n)``.

    ``n = 0`` is the weight left on the initialization: 1 when ``N = 0`` and 0
    otherwise (``eta_0`` is treated as 1 wherever it appears in a product).
    """
    if n < 0 or N < 0:
        raise ValueError(f"need n, N >= 0, got n={n}, N={N}")
    if N < n:
        return 0.0
    if n == 0:
        return 1.0 if N == 0 else 0.0
    w = learning_rate(n, H)
    for i in range(n + 1, N + 1):
        w *= 1.0 - learning_rate(i, H)
    return w


def eta_weights(N: int, H: int) -> np.ndarray:
    """``[eta_1^N, ..., eta_N^N]`` in one pass."""
    n = np.arange(1, N + 1, dtype=float)
    eta = (H + 1) / (H + n)
    # eta_n^N = eta_n * prod_{i>n} (1 - eta_i), built as a reverse cumulative product
    tail = np.ones(N)
    if N > 1:
        tail[:-1] = np.cumprod((1.0 - eta[1:])[::-1])[::-1]
    return eta * tail


@dataclass
class LearningRateReport:
    """Tightest margin seen for each property (positive means satisfied)."""

    H_set: tuple[int, ...]
    N_max: int
    margins: dict[str, tuple[float, int, int]] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    max_sum_error: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations

    def record(self, prop: str, margin: float, H: int, N: int, slack: float) -> None:
        if prop not in self.margins or margin < self.margins[prop][0]:
            self.margins[prop] = (float(margin), H, N)
        if margin < -slack:
            self.violations.append(f"H={H} N={N}: {prop} violated by {-margin:.3e}")

    def lines(self) -> list[str]:
        out = [f"H in {list(self.H_set)}, N <= {self.N_max}"]
        for prop, (margin, H, N) in self.margins.items():
            out.append(f"  {prop:<34s} worst margin {margin: .3e} at H={H} N={N}")
        out.append(f"  max |sum_n eta_n^N - 1| = {self.max_sum_error:.3e}")
        out.extend(self.violations)
        return out


def check_learning_rate_properties(H_set, N_max: int, slack: float = 1e-10) -> LearningRateReport:
    """Verify the standard bounds on the weights ``eta_n^N`` for every H in ``H_set`` and ``N <= N_max``.

    Checked, for ``a`` in {1/2, 1}:
    ``1/N^a <= sum_n eta_n^N / n^a <= 2/N^a``, ``max_n eta_n^N <= 2H/N``,
    ``sum_n (eta_n^N)^2 <= 2H/N`` and, for each n, the partial sums
    ``sum_{N=n}^{N_max} eta_n^N <= 1 + 1/H`` (the full series has positive
    terms, so bounding partial sums is what can be checked).
    """
    if N_max < 1:
        raise ValueError("N_max must be at least 1")
    H_set = tuple(int(h) for h in H_set)
    report = LearningRateReport(H_set, int(N_max))
    n_all = np.arange(1, N_max + 1, dtype=float)
    for H in H_set:
        eta = (H + 1) / (H + n_all)
        w = np.empty(0)
        col_sums = np.zeros(N_max)
        for N in range(1, N_max + 1):
            # eta_n^N = eta_n^{N-1} (1 - eta_N) for n < N, and eta_N^N = eta_N
            w = np.append(w * (1.0 - eta[N - 1]), eta[N - 1])
            col_sums[:N] += w
            n = n_all[:N]
            report.max_sum_error = max(report.max_sum_error, abs(float(w.sum()) - 1.0))
            for a, tag in ((0.5, "1/2"), (1.0, "1")):
                s = float(np.sum(w / n**a))
                lo, hi = 1.0 / N**a, 2.0 / N**a
                report.record(f"sum eta/n^{tag} >= 1/N^{tag}", s - lo, H, N, slack)
                report.record(f"sum eta/n^{tag} <= 2/N^{tag}", hi - s, H, N, slack)
            report.record("max eta <= 2H/N", 2.0 * H / N - float(w.max()), H, N, slack)
            report.record("sum eta^2 <= 2H/N", 2.0 * H / N - float(np.sum(w * w)), H, N, slack)
        worst = int(np.argmax(col_sums))
        report.record("sum_N eta_n^N <= 1 + 1/H", 1.0 + 1.0 / H - float(col_sums[worst]), H, worst + 1, slack)
    if report.max_sum_error > 1e-12:
        report.violations.append(f"sum_n eta_n^N deviates from 1 by {report.max_sum_error:.3e}")
    return report


# ---------------------------------------------------------------------------
# run metrics


@dataclass
class RunMetrics:
    """Per-episode records of one run; ``nash_gap`` is NaN off checkpoints."""

    H: int
    episode: list[int] = field(default_factory=list)
    value_gap: list[float] = field(default_factory=list)
    cum_value_gap: list[float] = field(default_factory=list)
    nash_gap: list[float] = field(default_factory=list)
    settled_fraction: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episode)

    def append(self, episode: int, value_gap: float, settled_fraction: float,
               nash_gap: float = math.nan) -> None:
        prev = self.cum_value_gap[-1] if self.cum_value_gap else 0.0
        self.episode.append(int(episode))
        self.value_gap.append(float(value_gap))
        self.cum_value_gap.append(prev + float(value_gap))
        self.nash_gap.append(float(nash_gap))
        self.settled_fraction.append(float(settled_fraction))

    @property
    def samples(self) -> np.ndarray:
        return np.asarray(self.episode, dtype=np.int64) * self.H

    @staticmethod
    def format_row(episode: int, H: int, value_gap: float, cum: float, nash_gap: float,
                   settled: float) -> str:
        ng = "" if math.isnan(nash_gap) else repr(float(nash_gap))
        return f"{episode},{episode * H},{float(value_gap)!r},{float(cum)!r},{ng},{float(settled)!r}"

    def csv_lines(self) -> list[str]:
        return [self.format_row(k, self.H, g, c, n, f) for k, g, c, n, f in
                zip(self.episode, self.value_gap, self.cum_value_gap, self.nash_gap, self.settled_fraction)]

    def write_csv(self, path) -> None:
        Path(path).write_text(",".join(CSV_HEADER) + "\n" + "".join(line + "\n" for line in self.csv_lines()))

    @classmethod
    def read_csv(cls, path, H: int | None = None) -> "RunMetrics":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"unexpected CSV header {header}")
            rows = list(reader)
        if H is None:
            H = int(rows[0][1]) // int(rows[0][0]) if rows else 1
        m = cls(H)
        for row in rows:
            m.episode.append(int(row[0]))
            m.value_gap.append(float(row[2]))
            m.cum_value_gap.append(float(row[3]))
            m.nash_gap.append(float(row[4]) if row[4] else math.nan)
            m.settled_fraction.append(float(row[5]))
        return m

    def invariant_violations(self, tol: float = 0.0) -> list[str]:
        out = []
        g = np.asarray(self.value_gap)
        c = np.asarray(self.cum_value_gap)
        f = np.asarray(self.settled_fraction)
        for name, arr, sign in (("value_gap", g, -1), ("cum_value_gap", c, 1), ("settled_fraction", f, 1)):
            d = sign * np.diff(arr)
            bad = np.nonzero(d < -tol)[0]
            if bad.size:
                out.append(f"{name} moves the wrong way at episode {self.episode[bad[0] + 1]}")
        return out


def regret_curve(metrics) -> np.ndarray:
    """Cumulative sum of the per-episode value gaps (an upper-bound proxy for regret)."""
    gaps = np.asarray(metrics.value_gap if isinstance(metrics, RunMetrics) else metrics, dtype=float)
    if gaps.size == 0:
        raise ValueError("regret_curve needs at least one episode")
    return np.cumsum(gaps)


def loglog_slope(series, k_min: int, k_max: int) -> float:
    """Least-squares slope of ``ln series[k]`` against ``ln k`` for k in [k_min, k_max].

    ``series[0]`` belongs to k = 1.
    """
    if not 1 <= k_min < k_max:
        raise ValueError(f"need 1 <= k_min < k_max, got {k_min}, {k_max}")
    y = np.asarray(series, dtype=float)
    if k_max > y.size:
        raise ValueError(f"window ends at {k_max} but the series has {y.size} entries")
    window = y[k_min - 1:k_max]
    if np.any(window <= 0.0):
        raise ValueError("series must be positive on the fitting window")
    x = np.log(np.arange(k_min, k_max + 1, dtype=float))
    ly = np.log(window)
    x = x - x.mean()
    return float(np.dot(x, ly - ly.mean()) / np.dot(x, x))


# ---------------------------------------------------------------------------
# invariant checkers


@dataclass
class SandwichReport:
    q_upper_violations: int = 0
    q_lower_violations: int = 0
    v_upper_violations: int = 0
    v_lower_violations: int = 0
    worst_q: float = 0.0
    worst_v: float = 0.0

    @property
    def total(self) -> int:
        return self.q_upper_violations + self.q_lower_violations + self.v_upper_violations + self.v_lower_violations

    @property
    def worst(self) -> float:
        return max(self.worst_q, self.worst_v)


def sandwich_check(state: LearnerState, oracle: ExactSolution, tol: float = 1e-9) -> SandwichReport:
    """Count cells where the lower estimates exceed, or the upper ones fall below, the equilibrium values."""
    H = state.H
    if oracle.q_star.shape != state.q_upper.shape:
        raise ValueError(f"oracle shape {oracle.q_star.shape} does not match state {state.q_upper.shape}")
    q, v = oracle.q_star, oracle.v_star
    up_q = q - state.q_upper      # positive where the upper estimate is too low
    lo_q = state.q_lower - q
    up_v = v - state.v_upper[:H]
    lo_v = state.v_lower[:H] - v
    rep = SandwichReport(
        int(np.sum(up_q > tol)), int(np.sum(lo_q > tol)),
        int(np.sum(up_v > tol)), int(np.sum(lo_v > tol)),
    )
    rep.worst_q = float(max(0.0, up_q.max(), lo_q.max()))
    rep.worst_v = float(max(0.0, up_v.max(), lo_v.max()))
    return rep


def reference_distance(state) -> float:
    """``max |V - V^R|`` over both sides and all (h, s)."""
    return float(max(np.abs(state.v_upper - state.v_upper_ref).max(),
                     np.abs(state.v_lower - state.v_lower_ref).max()))


class InvariantMonitor:
    """Tracks the exact per-update invariants of a learner between observations.

    Works for both the two-player and the multi-player state (the latter has
    a leading player axis on every table).  Comparisons are exact: the
    update rules take minima and maxima, so no tolerance is needed.
    """

    def __init__(self, state):
        self.counts = {
            "q_upper_increase": 0, "q_lower_decrease": 0,
            "v_upper_increase": 0, "v_lower_decrease": 0,
            "q_upper_ref_below": 0, "q_lower_ref_above": 0,
            "frozen_ref_changed": 0, "settled_fraction_decrease": 0,
        }
        self._snap(state)

    def _snap(self, st) -> None:
        self.q_upper = st.q_upper.copy()
        self.q_lower = st.q_lower.copy()
        self.v_upper = st.v_upper.copy()
        self.v_lower = st.v_lower.copy()
        self.v_upper_ref = st.v_upper_ref.copy()
        self.v_lower_ref = st.v_lower_ref.copy()
        self.unsettled = st.unsettled.copy()
        self.settled = st.settled_fraction

    def observe(self, st) -> None:
        c = self.counts
        c["q_upper_increase"] += int(np.sum(st.q_upper > self.q_upper))
        c["q_lower_decrease"] += int(np.sum(st.q_lower < self.q_lower))
        c["v_upper_increase"] += int(np.sum(st.v_upper > self.v_upper))
        c["v_lower_decrease"] += int(np.sum(st.v_lower < self.v_lower))
        c["q_upper_ref_below"] += int(np.sum(st.q_upper_ref < st.q_upper))
        c["q_lower_ref_above"] += int(np.sum(st.q_lower_ref > st.q_lower))
        H = self.unsettled.shape[-2]
        frozen = ~self.unsettled
        changed = (st.v_upper_ref[..., :H, :] != self.v_upper_ref[..., :H, :]) | \
                  (st.v_lower_ref[..., :H, :] != self.v_lower_ref[..., :H, :])
        c["frozen_ref_changed"] += int(np.sum(frozen & changed))
        if st.settled_fraction < self.settled:
            c["settled_fraction_decrease"] += 1
        self._snap(st)

    @property
    def total(self) -> int:
        return sum(self.counts.values())
