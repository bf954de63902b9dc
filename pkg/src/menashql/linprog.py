"""Dense linear programming and the equilibrium subroutines built on it.

The solver is a textbook two-phase tableau simplex using Bland's rule.  It is
meant for the tiny LPs that show up inside the learner (a few dozen variables
at most), so everything is dense and the pivoting kernel is compiled with
numba to keep the per-step cost of the learning loop low.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

Relation = Literal["<=", "=", ">="]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-9


class SolverError(RuntimeError):
    """Raised when the simplex stalls past its pivot budget or the tableau degenerates."""


class CCEError(RuntimeError):
    """Internal-consistency failure: a CCE LP reported infeasible or failed."""


@dataclass
class LinearProgram:
    """``sense`` c.x subject to rows of ``coeffs . x  rel  rhs`` and per-variable bounds.

    Bounds default to ``0 <= x < inf``.  ``-inf`` lower bounds are allowed
    (free or upper-bounded variables are split internally).
    """

    objective: np.ndarray
    sense: Literal["min", "max"] = "min"
    constraints: list[tuple[np.ndarray, Relation, float]] = field(default_factory=list)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        n = self.objective.shape[0]
        rows = []
        for coeffs, rel, rhs in self.constraints:
            coeffs = np.asarray(coeffs, dtype=float)
            if coeffs.shape != (n,):
                raise ValueError(f"constraint has {coeffs.shape} coefficients, expected ({n},)")
            if rel not in ("<=", "=", ">="):
                raise ValueError(f"unknown relation {rel!r}")
            rows.append((coeffs, rel, float(rhs)))
        self.constraints = rows
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.sense not in ("min", "max"):
            raise ValueError(f"unknown sense {self.sense!r}")

    @property
    def num_vars(self) -> int:
        return self.objective.shape[0]


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    value: float | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


# ---------------------------------------------------------------------------
# simplex kernel


@njit(cache=True)
def _pivot(T, row, col):
    T[row, :] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row:
            f = T[i, col]
            if f != 0.0:
                T[i, :] -= f * T[row, :]
                T[i, col] = 0.0


@njit(cache=True)
def _phase(T, basis, n_enter, max_iter, tol, rule):
    """Pivot on T until optimal.  Returns (status, iterations).

    ``rule`` 0 is Bland's rule (first improving column, smallest leaving
    index among ratio ties).  ``rule`` 1 is the steepest reduced cost with
    ties in the ratio test broken toward the largest pivot element; it is
    only used as a fallback when a Bland path loses accuracy.
    status: 0 optimal, 1 unbounded, 2 pivot budget exhausted.
    """
    m = T.shape[0] - 1
    rhs = T.shape[1] - 1
    it = 0
    while True:
        col = -1
        most = -tol
        for j in range(n_enter):
            if T[m, j] < most:
                col = j
                if rule == 0:
                    break
                most = T[m, j]
        if col == -1:
            return 0, it
        # pivot elements must be non-negligible relative to their column
        cmax = 1.0
        for i in range(m):
            cmax = max(cmax, abs(T[i, col]))
        ptol = tol * cmax
        best = np.inf
        for i in range(m):
            if T[i, col] > ptol:
                ratio = T[i, rhs] / T[i, col]
                if ratio < best:
                    best = ratio
        if best == np.inf:
            return 1, it
        row = -1
        best_var = 1 << 62
        best_el = 0.0
        for i in range(m):
            if T[i, col] > ptol and T[i, rhs] / T[i, col] <= best + 1e-12:
                if rule == 0:
                    if basis[i] < best_var:
                        row = i
                        best_var = basis[i]
                elif T[i, col] > best_el:
                    row = i
                    best_el = T[i, col]
        _pivot(T, row, col)
        basis[row] = col
        it += 1
        if it >= max_iter:
            return 2, it


@njit(cache=True)
def _two_phase(A, b, c, basis0, max_iter, tol, feas_tol, rule):
    """min c.x  s.t.  A x = b, x >= 0, with b >= 0.

    ``basis0[i]`` names a column that is the i-th unit vector of A, or -1 when
    row i needs an artificial variable.  Returns (status, x, iterations) with
    status 0 optimal, 1 unbounded, 2 stalled, 3 infeasible.
    """
    m, n = A.shape
    n_art = 0
    for i in range(m):
        if basis0[i] < 0:
            n_art += 1
    T = np.zeros((m + 1, n + n_art + 1))
    T[:m, :n] = A
    T[:m, -1] = b
    basis = np.empty(m, dtype=np.int64)
    k = n
    for i in range(m):
        if basis0[i] < 0:
            T[i, k] = 1.0
            basis[i] = k
            k += 1
        else:
            basis[i] = basis0[i]
    iters = 0
    x = np.zeros(n)
    if n_art > 0:
        for i in range(m):
            if basis[i] >= n:
                T[m, :n] -= T[i, :n]
                T[m, -1] -= T[i, -1]
        status, it = _phase(T, basis, n + n_art, max_iter, tol, rule)
        iters += it
        if status == 2:
            return 2, x, iters
        scale = 1.0
        for i in range(m):
            scale = max(scale, abs(b[i]))
        if -T[m, -1] > feas_tol * scale:
            return 3, x, iters
        # drive remaining artificials out of the basis; rows with no
        # eligible pivot are redundant and keep a zero-level artificial
        for i in range(m):
            if basis[i] >= n:
                for j in range(n):
                    if abs(T[i, j]) > tol:
                        _pivot(T, i, j)
                        basis[i] = j
                        break
    T[m, :] = 0.0
    T[m, :n] = c
    for i in range(m):
        if basis[i] < n:
            cb = c[basis[i]]
            if cb != 0.0:
                T[m, :] -= cb * T[i, :]
    status, it = _phase(T, basis, n, max_iter, tol, rule)
    iters += it
    if status != 0:
        return status, x, iters
    for i in range(m):
        if basis[i] < n:
            x[basis[i]] = T[i, -1]
    return 0, x, iters


def _run_kernel(A, b, c, basis0, max_iter=None, rule=0):
    m, n = A.shape
    if max_iter is None:
        max_iter = 50 * (m + n) + 100
    return _two_phase(
        np.ascontiguousarray(A, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        np.ascontiguousarray(c, dtype=np.float64),
        np.ascontiguousarray(basis0, dtype=np.int64),
        max_iter,
        PIVOT_TOL,
        FEAS_TOL,
        rule,
    )


# ---------------------------------------------------------------------------
# general LPs


def _standard_form(lp: LinearProgram):
    """Rewrite ``lp`` as min c.y, A y = b, y >= 0, b >= 0.

    Returns (A, b, c, basis0, recover) where ``recover(y)`` maps a standard
    solution back to the original variables and ``offset`` is folded into
    the objective by the caller.
    """
    n = lp.num_vars
    # each original variable becomes  x = shift + sum(sign * y_col)
    cols: list[list[tuple[int, float]]] = []
    shift = np.zeros(n)
    extra_rows: list[tuple[dict[int, float], Relation, float]] = []
    ny = 0
    for j in range(n):
        lo, hi = lp.lower[j], lp.upper[j]
        if math.isfinite(lo):
            shift[j] = lo
            cols.append([(ny, 1.0)])
            if math.isfinite(hi):
                if hi < lo:
                    raise ValueError(f"variable {j}: upper bound {hi} below lower bound {lo}")
                extra_rows.append(({ny: 1.0}, "<=", hi - lo))
            ny += 1
        elif math.isfinite(hi):
            shift[j] = hi
            cols.append([(ny, -1.0)])
            ny += 1
        else:
            cols.append([(ny, 1.0), (ny + 1, -1.0)])
            ny += 2

    def expand(coeffs):
        out = np.zeros(ny)
        for j, cj in enumerate(coeffs):
            if cj != 0.0:
                for y, sgn in cols[j]:
                    out[y] += sgn * cj
        return out

    rows = []
    for coeffs, rel, rhs in lp.constraints:
        rows.append((expand(coeffs), rel, rhs - float(coeffs @ shift)))
    for mapping, rel, rhs in extra_rows:
        r = np.zeros(ny)
        for y, v in mapping.items():
            r[y] = v
        rows.append((r, rel, rhs))

    n_slack = sum(1 for _, rel, _ in rows if rel != "=")
    m = len(rows)
    A = np.zeros((m, ny + n_slack))
    b = np.zeros(m)
    basis0 = np.full(m, -1, dtype=np.int64)
    k = ny
    for i, (r, rel, rhs) in enumerate(rows):
        A[i, :ny] = r
        b[i] = rhs
        if rel != "=":
            A[i, k] = 1.0 if rel == "<=" else -1.0
        if b[i] < 0:
            A[i] *= -1.0
            b[i] = -b[i]
        if rel != "=":
            if A[i, k] == 1.0:
                basis0[i] = k
            k += 1

    sign = 1.0 if lp.sense == "min" else -1.0
    c = np.zeros(ny + n_slack)
    c[:ny] = sign * expand(lp.objective)

    def recover(y):
        x = shift.copy()
        for j in range(n):
            for col, sgn in cols[j]:
                x[j] += sgn * y[col]
        return x

    return A, b, c, basis0, recover


def format_tableau(lp: LinearProgram) -> str:
    """Plain-text dump of an LP in its standard (equality) form."""
    A, b, c, basis0, _ = _standard_form(lp)
    lines = [f"# sense={lp.sense} vars={lp.num_vars} rows={A.shape[0]} cols={A.shape[1]}"]
    lines.append("c   | " + " ".join(f"{v: .6g}" for v in c))
    for i in range(A.shape[0]):
        tag = f"y{basis0[i]}" if basis0[i] >= 0 else "art"
        lines.append(f"r{i:<2} | " + " ".join(f"{v: .6g}" for v in A[i]) + f" | {b[i]: .6g}  [{tag}]")
    return "\n".join(lines)


def solve_lp(lp: LinearProgram, debug: bool = False) -> LPResult:
    """Solve ``lp`` with the two-phase Bland simplex.

    Infeasible and unbounded problems are reported through ``LPResult.status``;
    only a stalled pivot sequence raises :class:`SolverError`.
    """
    A, b, c, basis0, recover = _standard_form(lp)
    if debug:
        logger.debug("LP tableau\n%s", format_tableau(lp))
    if A.shape[0] == 0:
        # only sign constraints: optimum at the origin unless some cost is negative
        if np.any(c < 0):
            return LPResult(UNBOUNDED)
        x = recover(np.zeros(A.shape[1]))
        return LPResult(OPTIMAL, x, float(lp.objective @ x))
    status, y, iters = _run_kernel(A, b, c, basis0)
    if status == 3:
        return LPResult(INFEASIBLE, iterations=iters)
    if status == 1:
        return LPResult(UNBOUNDED, iterations=iters)
    if status == 2:
        raise SolverError(f"simplex exceeded its pivot budget after {iters} pivots")
    x = recover(y)
    return LPResult(OPTIMAL, x, float(lp.objective @ x), iters)


# ---------------------------------------------------------------------------
# zero-sum matrix games


def matrix_game_value(M) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and optimal mixed strategies of the zero-sum game with payoff ``M`` to the row player.

    The matrix is shifted to be strictly positive so both players' problems
    reduce to the classic normalized LPs.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.size == 0 or not np.all(np.isfinite(M)):
        raise ValueError("matrix game needs a finite, non-empty 2-D payoff matrix")
    A, B = M.shape
    lo = float(M.min())
    P = M - lo + 1.0

    # row player: min sum(u)  s.t.  P^T u >= 1, u >= 0
    row_lp = LinearProgram(np.ones(A), "min", [(P[:, j], ">=", 1.0) for j in range(B)])
    row = solve_lp(row_lp)
    # column player: max sum(w)  s.t.  P w <= 1, w >= 0
    col_lp = LinearProgram(np.ones(B), "max", [(P[i, :], "<=", 1.0) for i in range(A)])
    col = solve_lp(col_lp)
    if not (row.optimal and col.optimal):
        raise SolverError(f"matrix game LP failed: row={row.status} col={col.status}")
    x = np.maximum(row.x, 0.0)
    y = np.maximum(col.x, 0.0)
    value = 1.0 / x.sum() + lo - 1.0
    return value, x / x.sum(), y / y.sum()


# ---------------------------------------------------------------------------
# coarse correlated equilibria


def _cce_vertex(G: np.ndarray, cost: np.ndarray, rule: int = 0):
    R, J = G.shape
    A = np.zeros((R + 1, J + R))
    A[:R, :J] = G
    A[:R, J:] = np.eye(R)
    A[R, :J] = 1.0
    b = np.zeros(R + 1)
    b[R] = 1.0
    basis0 = np.empty(R + 1, dtype=np.int64)
    basis0[:R] = np.arange(J, J + R)
    basis0[R] = -1
    c = np.zeros(J + R)
    c[:J] = cost
    status, y, iters = _run_kernel(A, b, c, basis0, rule=rule)
    if status != 0:
        return status, None, iters
    pi = np.maximum(y[:J], 0.0)
    return 0, pi / pi.sum(), iters


def _cce_from_rows(G: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Minimize cost.pi over the simplex subject to G pi <= 0.

    After the LP returns a vertex, the solution is pushed along the segment
    toward the uniform distribution for as long as it stays feasible and
    optimal, so ties resolve toward spread-out play rather than an arbitrary
    vertex.
    """
    R, J = G.shape
    gscale = max(1.0, float(np.abs(G).max()) if G.size else 1.0)
    # equilibrated rows keep the tableau entries on a common scale
    rmax = np.abs(G).max(axis=1) if G.size else np.ones(R)
    Gs = G / np.where(rmax > 0.0, rmax, 1.0)[:, None]
    # every constraint has a zero right-hand side, so phase 1 is fully
    # degenerate and a Bland path can lose accuracy on a thin feasible
    # cone; fall back to other deterministic pivot paths before giving up
    attempts = ((np.arange(J), 0), (np.arange(J)[::-1], 0), (np.arange(J), 1))
    best, best_viol, statuses = None, np.inf, []
    for order, rule in attempts:
        status, vertex, iters = _cce_vertex(Gs[:, order], cost[order], rule)
        statuses.append(status)
        if status != 0:
            continue
        cand = np.empty(J)
        cand[order] = vertex
        viol = float((G @ cand).max()) if R else 0.0
        if viol < best_viol:
            best, best_viol = cand, viol
        if viol <= 1e-10 * gscale:
            break
    if best is None or best_viol > 1e-8 * gscale:
        raise CCEError(f"CCE linear program failed on every pivot path (statuses {statuses}, "
                       f"best violation {best_viol:.3e})")
    pi = best

    u = np.full(J, 1.0 / J)
    scale = max(1.0, float(np.abs(cost).max()))
    if cost @ u <= cost @ pi + 1e-12 * scale:
        gv = G @ pi
        gu = G @ u
        t = 1.0
        for i in range(R):
            if gu[i] > 0.0:
                t = min(t, max(0.0, -gv[i]) / (gu[i] - gv[i]))
        if t > 0.0:
            pi = (1.0 - t) * pi + t * u
            pi = np.maximum(pi, 0.0)
            pi /= pi.sum()
    return pi


def cce_rows(q_upper, q_lower) -> np.ndarray:
    """Constraint rows G (with G pi <= 0) encoding the two CCE deviation conditions."""
    q_upper = np.asarray(q_upper, dtype=float)
    q_lower = np.asarray(q_lower, dtype=float)
    A, B = q_upper.shape
    G = np.empty((A + B, A * B))
    # max player deviating to a' must not gain w.r.t. q_upper
    for ap in range(A):
        G[ap] = (q_upper[ap][None, :] - q_upper).ravel()
    # min player deviating to b' must not gain (lower) w.r.t. q_lower
    for bp in range(B):
        G[A + bp] = (q_lower - q_lower[:, bp][:, None]).ravel()
    return G


def compute_cce(q_upper, q_lower) -> np.ndarray:
    """Joint distribution over (a, b) satisfying both CCE conditions.

    Among feasible distributions, the one minimizing E[q_upper - q_lower]
    is returned.  Output has shape (A, B).
    """
    q_upper = np.asarray(q_upper, dtype=float)
    q_lower = np.asarray(q_lower, dtype=float)
    if q_upper.shape != q_lower.shape or q_upper.ndim != 2:
        raise ValueError("q_upper and q_lower must be matching A x B matrices")
    G = cce_rows(q_upper, q_lower)
    pi = _cce_from_rows(G, (q_upper - q_lower).ravel())
    return pi.reshape(q_upper.shape)


def cce_violation(pi, q_upper, q_lower) -> float:
    """Largest amount by which ``pi`` violates either CCE condition (<= 0 means satisfied)."""
    pi = np.asarray(pi, dtype=float)
    G = cce_rows(q_upper, q_lower)
    return float((G @ pi.ravel()).max())


def deviation_index(action_counts: Sequence[int]) -> np.ndarray:
    """Table ``dev[i, a', j]``: flat joint index of j with player i's action replaced by a'."""
    action_counts = tuple(int(a) for a in action_counts)
    J = int(np.prod(action_counts))
    amax = max(action_counts)
    joint = np.array(np.unravel_index(np.arange(J), action_counts))  # (m, J)
    dev = np.full((len(action_counts), amax, J), -1, dtype=np.int64)
    for i, Ai in enumerate(action_counts):
        for ap in range(Ai):
            alt = joint.copy()
            alt[i] = ap
            dev[i, ap] = np.ravel_multi_index(tuple(alt), action_counts)
    return dev


def cce_rows_multi(q_upper: np.ndarray, action_counts: Sequence[int], dev=None) -> np.ndarray:
    """Rows G for the multi-player unilateral-deviation conditions on flattened ``q_upper`` (m, J)."""
    if dev is None:
        dev = deviation_index(action_counts)
    rows = []
    for i, Ai in enumerate(action_counts):
        qi = q_upper[i]
        for ap in range(Ai):
            rows.append(qi[dev[i, ap]] - qi)
    return np.array(rows)


def compute_cce_multi(matrices) -> np.ndarray:
    """CCE over the joint action space of m >= 2 players.

    ``matrices`` is a list of ``(q_upper_i, q_lower_i)`` pairs, each an array
    of shape ``(A_1, ..., A_m)``.  No player may gain by an unconditional
    deviation as measured by its own optimistic estimate ``q_upper_i``; the
    objective minimizes the summed width ``sum_i E[q_upper_i - q_lower_i]``.
    """
    if len(matrices) < 2:
        raise ValueError("compute_cce_multi needs at least two players")
    shape = np.asarray(matrices[0][0]).shape
    if len(shape) != len(matrices):
        raise ValueError(f"payoff tensors have {len(shape)} axes but there are {len(matrices)} players")
    qu = np.array([np.asarray(u, dtype=float).ravel() for u, _ in matrices])
    ql = np.array([np.asarray(l, dtype=float).ravel() for _, l in matrices])
    G = cce_rows_multi(qu, shape)
    pi = _cce_from_rows(G, (qu - ql).sum(axis=0))
    return pi.reshape(shape)


def cce_violation_multi(pi, q_uppers) -> float:
    """Largest unilateral-deviation gain under ``pi`` over all players (<= 0 means satisfied)."""
    pi = np.asarray(pi, dtype=float)
    qu = np.array([np.asarray(q, dtype=float).ravel() for q in q_uppers])
    G = cce_rows_multi(qu, pi.shape)
    return float((G @ pi.ravel()).max())
