import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog as scipy_linprog

from menashql.linprog import (
    CCEError,
    INFEASIBLE,
    LinearProgram,
    OPTIMAL,
    UNBOUNDED,
    _cce_from_rows,
    cce_rows,
    cce_violation,
    cce_violation_multi,
    compute_cce,
    compute_cce_multi,
    format_tableau,
    matrix_game_value,
    solve_lp,
)
from oracles import support_enumeration_value, vertex_enumeration


# ---------------------------------------------------------------------------
# solve_lp


def test_max_x_bounded_by_one():
    res = solve_lp(LinearProgram([1.0], "max", [([1.0], "<=", 1.0)]))
    assert res.status == OPTIMAL
    assert res.x[0] == pytest.approx(1.0, abs=1e-12)
    assert res.value == pytest.approx(1.0, abs=1e-12)


def test_contradictory_bounds_are_infeasible():
    res = solve_lp(LinearProgram([0.0], "min", [([1.0], ">=", 2.0), ([1.0], "<=", 1.0)]))
    assert res.status == INFEASIBLE
    assert res.x is None


def test_unbounded_reported():
    assert solve_lp(LinearProgram([1.0, 1.0], "max", [([1.0, -1.0], "<=", 1.0)])).status == UNBOUNDED
    assert solve_lp(LinearProgram([-1.0], "min")).status == UNBOUNDED


def test_variable_bounds_and_free_variables():
    # min x0 - x1 with -2 <= x0 <= 3, x1 free but x1 <= 4, x0 + x1 >= -1
    lp = LinearProgram([1.0, -1.0], "min", [([1.0, 1.0], ">=", -1.0), ([0.0, 1.0], "<=", 4.0)],
                       lower=[-2.0, -np.inf], upper=[3.0, np.inf])
    res = solve_lp(lp)
    assert res.status == OPTIMAL
    np.testing.assert_allclose(res.x, [-2.0, 4.0], atol=1e-10)
    assert res.value == pytest.approx(-6.0)


def test_equality_constraints():
    lp = LinearProgram([1.0, 2.0, 3.0], "min", [([1.0, 1.0, 1.0], "=", 1.0), ([1.0, -1.0, 0.0], "=", 0.0)])
    res = solve_lp(lp)
    np.testing.assert_allclose(res.x, [0.5, 0.5, 0.0], atol=1e-12)


def _random_feasible_lp(rng):
    n = int(rng.integers(1, 9))
    m = int(rng.integers(1, 9))
    x0 = rng.random(n) * 2
    rows = []
    for _ in range(m):
        a = rng.normal(size=n)
        kind = rng.choice(["<=", ">=", "="], p=[0.6, 0.25, 0.15])
        val = float(a @ x0)
        rhs = val + rng.random() if kind == "<=" else val - rng.random() if kind == ">=" else val
        rows.append((a, str(kind), rhs))
    # a positive budget row keeps the feasible region bounded
    rows.append((rng.random(n) + 0.1, "<=", float((rng.random(n) + 0.1) @ x0) + 5.0 + 10 * n))
    c = rng.normal(size=n)
    return c, str(rng.choice(["min", "max"])), rows


def test_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 200:
        c, sense, rows = _random_feasible_lp(rng)
        oracle = vertex_enumeration(c, sense, rows)
        if oracle is None:
            continue  # the budget row may cut x0 off; skip the rare infeasible draw
        res = solve_lp(LinearProgram(c, sense, rows))
        assert res.status == OPTIMAL
        assert res.value == pytest.approx(oracle, abs=1e-8, rel=1e-9)
        checked += 1


def test_solve_lp_is_deterministic():
    rng = np.random.default_rng(5)
    c, sense, rows = _random_feasible_lp(rng)
    a = solve_lp(LinearProgram(c, sense, rows))
    b = solve_lp(LinearProgram(c, sense, rows))
    assert a.x.tobytes() == b.x.tobytes()
    assert a.iterations == b.iterations


def test_format_tableau_lists_every_row():
    lp = LinearProgram([1.0, 1.0], "max", [([1.0, 2.0], "<=", 4.0), ([3.0, 1.0], ">=", 1.0)])
    text = format_tableau(lp)
    assert text.startswith("# sense=max vars=2 rows=2")
    assert text.count("\nr") == 2


def test_bad_constraint_shape_rejected():
    with pytest.raises(ValueError):
        LinearProgram([1.0, 2.0], "min", [([1.0], "<=", 1.0)])
    with pytest.raises(ValueError):
        LinearProgram([1.0], "min", [([1.0], "<", 1.0)])


# ---------------------------------------------------------------------------
# matrix games


def test_one_by_one_game():
    v, x, y = matrix_game_value([[0.37]])
    assert v == pytest.approx(0.37, abs=1e-12)
    assert x.tolist() == [1.0] and y.tolist() == [1.0]


def test_matching_pennies():
    v, x, y = matrix_game_value([[1.0, -1.0], [-1.0, 1.0]])
    assert v == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(y, [0.5, 0.5], atol=1e-12)


def _check_equilibrium(M, v, x, y, tol=1e-9):
    assert abs(x.sum() - 1) < 1e-12 and abs(y.sum() - 1) < 1e-12
    assert x.min() >= 0 and y.min() >= 0
    assert (x @ M).min() == pytest.approx(v, abs=tol)
    assert (M @ y).max() == pytest.approx(v, abs=tol)


def test_random_three_by_three_against_support_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(100):
        M = rng.normal(size=(3, 3))
        v, x, y = matrix_game_value(M)
        assert v == pytest.approx(support_enumeration_value(M)[0], abs=1e-8)
        _check_equilibrium(M, v, x, y)


def test_all_sign_pattern_two_by_two():
    for entries in itertools.product((-1.0, 0.0, 1.0), repeat=4):
        M = np.array(entries).reshape(2, 2)
        v, x, y = matrix_game_value(M)
        assert v == pytest.approx(support_enumeration_value(M)[0], abs=1e-8)
        _check_equilibrium(M, v, x, y)


def test_rectangular_games_match_scipy():
    rng = np.random.default_rng(11)
    for _ in range(50):
        A, B = rng.integers(1, 6, size=2)
        M = rng.random((A, B))
        v, _, _ = matrix_game_value(M)
        # max v s.t. x^T M >= v, sum x = 1 (independent solver)
        c = np.zeros(A + 1)
        c[-1] = -1.0
        A_ub = np.hstack([-M.T, np.ones((B, 1))])
        res = scipy_linprog(c, A_ub=A_ub, b_ub=np.zeros(B), A_eq=[[1.0] * A + [0.0]], b_eq=[1.0],
                            bounds=[(0, None)] * A + [(None, None)])
        assert v == pytest.approx(-res.fun, abs=1e-8)


matrices = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-5, 5, allow_nan=False, width=32))


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_minimax_duality(M):
    v, x, y = matrix_game_value(M)
    vt, xt, yt = matrix_game_value(-M.T)
    assert vt == pytest.approx(-v, abs=1e-8)
    # the transposed game's row player plays like the original column player
    assert (M @ xt).max() == pytest.approx(v, abs=1e-8)
    assert (yt @ M).min() == pytest.approx(v, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(-10, 10))
def test_shift_equivariance(M, c):
    assert matrix_game_value(M + c)[0] == pytest.approx(matrix_game_value(M)[0] + c, abs=1e-8)


def test_non_finite_matrix_rejected():
    with pytest.raises(ValueError):
        matrix_game_value([[np.nan]])


# ---------------------------------------------------------------------------
# CCE


def test_constant_matrices_give_uniform():
    pi = compute_cce(np.full((3, 2), 1.5), np.full((3, 2), 1.5))
    np.testing.assert_allclose(pi, np.full((3, 2), 1 / 6), atol=1e-12)


def test_dominant_row_takes_all_mass():
    q = np.array([[2.0, 2.0], [0.0, 0.0]])
    pi = compute_cce(q, q)
    assert pi[0].sum() == pytest.approx(1.0, abs=1e-12)
    assert pi[1].sum() == pytest.approx(0.0, abs=1e-12)


def _scipy_cce_optimum(qu, ql):
    G = cce_rows(qu, ql)
    J = qu.size
    res = scipy_linprog((qu - ql).ravel(), A_ub=G, b_ub=np.zeros(G.shape[0]),
                        A_eq=np.ones((1, J)), b_eq=[1.0], bounds=[(0, None)] * J, method="highs")
    assert res.status == 0
    return res.fun


def test_random_cce_feasible_and_optimal():
    rng = np.random.default_rng(3)
    for _ in range(300):
        A, B = rng.integers(1, 7, size=2)
        ql = rng.random((A, B)) * 10
        qu = ql + rng.random((A, B)) * (10 - ql)
        pi = compute_cce(qu, ql)
        assert pi.min() >= 0.0
        assert abs(pi.sum() - 1.0) <= 1e-10
        assert cce_violation(pi, qu, ql) <= 1e-9
        assert float((pi * (qu - ql)).sum()) == pytest.approx(_scipy_cce_optimum(qu, ql), abs=1e-7)


def test_cce_accepts_crossed_bounds():
    rng = np.random.default_rng(8)
    for _ in range(50):
        qu, ql = rng.random((3, 3)), rng.random((3, 3))
        assert cce_violation(compute_cce(qu, ql), qu, ql) <= 1e-9


def test_cce_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        compute_cce(np.zeros((2, 2)), np.zeros((2, 3)))


def test_cce_internal_error_surfaces():
    # an infeasible row system (x >= 0, sum 1, -pi <= -? impossible) must raise, not return garbage
    G = np.ones((1, 2))  # pi_0 + pi_1 <= 0 contradicts the simplex
    with pytest.raises(CCEError):
        _cce_from_rows(G, np.zeros(2))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_cce_constraints_property(A, B, seed):
    rng = np.random.default_rng(seed)
    ql = np.round(rng.random((A, B)) * 4, 1)  # coarse grid: many ties and degeneracies
    qu = ql + np.round(rng.random((A, B)) * 2, 1)
    pi = compute_cce(qu, ql)
    assert cce_violation(pi, qu, ql) <= 1e-9
    assert abs(pi.sum() - 1) <= 1e-10 and pi.min() >= 0


def test_multi_cce_matches_two_player_constraints():
    # player 2's optimistic estimate of its own payoff is H - q_lower of the zero-sum pair
    rng = np.random.default_rng(4)
    H = 5.0
    for _ in range(100):
        A, B = rng.integers(1, 5, size=2)
        ql = rng.random((A, B)) * H
        qu = np.minimum(ql + rng.random((A, B)), H)
        pi2 = compute_cce(qu, ql)
        pim = compute_cce_multi([(qu, ql), (H - ql, H - qu)])
        # both outputs satisfy each other's constraint systems
        assert cce_violation(pim, qu, ql) <= 1e-9
        assert cce_violation_multi(pi2, [qu, H - ql]) <= 1e-9


def test_multi_single_actions_point_mass():
    q = np.full((1, 1, 1), 0.3)
    pi = compute_cce_multi([(q, q), (q, q), (q, q)])
    assert pi.shape == (1, 1, 1) and pi.item() == pytest.approx(1.0)


def test_multi_symmetric_three_player():
    rng = np.random.default_rng(9)
    base = rng.random((2, 2, 2))
    # one payoff tensor shared by all players and invariant under permuting them
    sym = sum(np.transpose(base, p) for p in itertools.permutations(range(3))) / 6
    qus = [sym, sym, sym]
    pi = compute_cce_multi([(q, q - 0.1) for q in qus])
    assert cce_violation_multi(pi, qus) <= 1e-9
    assert abs(pi.sum() - 1) < 1e-10


def test_uniform_is_not_always_a_symmetric_cce():
    # common payoff 1 only when everyone plays 0: deviating to 0 beats uniform play
    q = np.zeros((2, 2, 2))
    q[0, 0, 0] = 1.0
    assert cce_violation_multi(np.full((2, 2, 2), 1 / 8), [q, q, q]) > 0.1
    pi = compute_cce_multi([(q, q), (q, q), (q, q)])
    assert cce_violation_multi(pi, [q, q, q]) <= 1e-9


def test_multi_random_three_player():
    rng = np.random.default_rng(10)
    for _ in range(50):
        shape = tuple(rng.integers(1, 4, size=3))
        mats = []
        for _ in range(3):
            lo = rng.random(shape) * 3
            mats.append((lo + rng.random(shape), lo))
        pi = compute_cce_multi(mats)
        assert cce_violation_multi(pi, [u for u, _ in mats]) <= 1e-9
        assert pi.min() >= 0 and abs(pi.sum() - 1) <= 1e-10


def test_multi_needs_two_players():
    with pytest.raises(ValueError):
        compute_cce_multi([(np.zeros(2), np.zeros(2))])
