"""Three players learning a coarse correlated equilibrium of a general-sum game.

Prints each player's value bracket at the initial state and the largest
unilateral gain (CCE gap) of the shared correlated policy.  As in the zero-sum demo, the bonus scale
defaults below the library default so progress shows within seconds.

    python demos/three_player.py [K] [c_b]
"""

import sys

from menashql.learner import LearnerConfig
from menashql.multi import cce_gap, generate_random_general, init_multi, run_episode_multi
from menashql.rng import episode_rng

K = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
C_B = float(sys.argv[2]) if len(sys.argv) > 2 else 0.2
game = generate_random_general(0, S=2, action_counts=(2, 2, 2), H=2)
state = init_multi(game.S, game.action_counts, game.H, LearnerConfig(K, c_b=C_B))
for k in range(1, K + 1):
    run_episode_multi(state, game, episode_rng(seed=5, episode=k))
    if k & (k - 1) == 0 or k == K:
        widths = " ".join(f"{w:6.3f}" for w in state.value_gaps(game.initial_state))
        print(f"episode {k:7d}  bracket widths [{widths}]  cce gap {cce_gap(game, state.correlated_policy()):.4f}")
