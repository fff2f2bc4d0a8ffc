"""Two agents, one shared preference.

Matching actions pays on the task objective but costs on the safety one.
With per-agent rate heads the joint chain only moves one agent at a time,
yet the agents should coordinate when the task matters and spread out when
safety does.  The warm-up model (no Q-weighting) is shown for contrast.
"""
import numpy as np

from qdfm import TrainConfig, generate_dataset, make_env, train
from qdfm.marl import coordination_rate
from qdfm.metrics import preference_sweep, simplex_grid
from qdfm.training import QDFMPolicy

env = make_env("matrix")
data = generate_dataset(env, episodes=1000, seed=0)
res = train(TrainConfig(seed=0), data, env)
warm = QDFMPolicy(res.warmup_field, res.behavior, env.encode, source="uniform")

rng = np.random.default_rng(1)
for name, policy in (("Q-weighted", res.policy), ("warm-up", warm)):
    for om in ((1.0, 0.0), (0.5, 0.5), (0.0, 1.0)):
        acts = policy.act(rng.integers(2, size=2000), np.array([om]), rng)
        print(f"{name:10s} omega={om}: coordination {coordination_rate(env.split(acts)):.3f}")
    hv = preference_sweep(policy, env, simplex_grid(2, 21), episodes=200, seed=0).hv
    print(f"{name:10s} hypervolume {hv:.2f}")
