"""Self-play on a small random zero-sum Markov game.

Solves the game exactly, then runs the learner and prints, at powers of two,
the width of its value bracket at the initial state, whether the bracket
still contains the true value, and the Nash gap of the marginal policies it
would deploy.  The bonus scale defaults to 0.5 rather than the library
default of 2: at c_b = 2 the exploration bonuses exceed H for tens of
thousands of episodes and the bracket stays at [0, H] for the whole demo.

    python demos/zero_sum_selfplay.py [K] [c_b]
"""

import sys

from menashql.evaluation import sandwich_check
from menashql.game import generate_random, nash_gap, nash_values
from menashql.learner import LearnerConfig, init_state, marginals, run_episode
from menashql.rng import episode_rng

K = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
C_B = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
game = generate_random(0, (2, 2, 2, 3))          # S=2, A=2, B=2, H=3
sol = nash_values(game)
s1 = game.initial_state
print(f"equilibrium value V*(s1) = {sol.v_star[0, s1]:.4f}")

state = init_state(game.dims, LearnerConfig(K, c_b=C_B))
print(f"{'episode':>8} {'V_lower':>8} {'V_upper':>8} {'bracket ok':>10} {'nash gap':>9} {'settled':>8}")
for k in range(1, K + 1):
    run_episode(state, game, episode_rng(seed=1, episode=k))
    if k & (k - 1) == 0 or k == K:
        pair = marginals(state.pi)
        ok = sandwich_check(state, sol).total == 0
        print(f"{k:8d} {state.v_lower[0, s1]:8.4f} {state.v_upper[0, s1]:8.4f} {str(ok):>10} "
              f"{nash_gap(game, pair.mu, pair.nu):9.4f} {state.settled_fraction:8.2f}")
