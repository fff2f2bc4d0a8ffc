"""Two corridors, one trap: mode selection without interpolation.

Half the offline episodes walk up the left corridor to goal A, half up the
right one to goal B.  The straight path between them runs through a trap
that no episode visits.  A preference-conditioned flow should commit to one
corridor per episode and never wander into the middle.  Takes a couple of
minutes on one core.
"""
import numpy as np

from qdfm import TrainConfig, generate_dataset, make_env, train
from qdfm.metrics import batched_rollouts, heatmap_for_env

env = make_env("fork")
data = generate_dataset(env, episodes=5000, seed=0)
print(f"{len(data)} transitions, trap visits in data:",
      int(np.sum(data.s2 == env.trap_state)))

res = train(TrainConfig(divergence="kl", k3=8000, seed=0), data, env)

for om in ((1.0, 0.0), (0.5, 0.5), (0.0, 1.0)):
    traces = batched_rollouts(env, res.policy, np.array(om), 1000, np.random.default_rng(0))
    H = heatmap_for_env(env, traces)
    print(f"\nomega={om}  goal A {H[env.goal_a]}, goal B {H[env.goal_b]}, trap {H[env.trap]}")
    print(H)
