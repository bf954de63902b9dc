"""Equilibria of single stage games, the building block of every update.

Shows the minimax value of rock-paper-scissors, the joint distribution
picked for a pair of optimistic and pessimistic payoff estimates, and a
three-player coarse correlated equilibrium checked against every
unilateral deviation.

    python demos/stage_equilibria.py
"""

import numpy as np

from menashql.linprog import (
    cce_violation,
    cce_violation_multi,
    compute_cce,
    compute_cce_multi,
    matrix_game_value,
)

np.set_printoptions(precision=4, suppress=True)

rps = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=float)
value, x, y = matrix_game_value(rps)
print(f"rock-paper-scissors: value {value:+.4f}, row strategy {x}, column strategy {y}")

# the max player trusts q_upper, the min player trusts q_lower
q_upper = np.array([[3.0, 1.0], [2.0, 2.5]])
q_lower = np.array([[2.0, 0.5], [1.5, 1.0]])
pi = compute_cce(q_upper, q_lower)
print("joint policy for the two-player estimates:")
print(pi)
print(f"  largest deviation gain {cce_violation(pi, q_upper, q_lower):+.2e} (<= 0 means no one gains)")

rng = np.random.default_rng(7)
uppers = [rng.uniform(0, 1, (2, 2, 2)) for _ in range(3)]
pi3 = compute_cce_multi([(u, 0.5 * u) for u in uppers])
support = np.argwhere(pi3 > 1e-9)
print("three-player joint policy support:")
for idx in support:
    print(f"  actions {tuple(int(i) for i in idx)}: {pi3[tuple(idx)]:.4f}")
print(f"  largest deviation gain {cce_violation_multi(pi3, uppers):+.2e}")
