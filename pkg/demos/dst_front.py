"""Sweeping preferences on Deep-Sea-Treasure.

One model is trained on a mixture of divers (one per treasure) and then
queried at 21 preferences without retraining.  The averaged returns should
trace the convex part of the treasure/time trade-off.
"""
import numpy as np

from qdfm import TrainConfig, generate_dataset, make_env, train
from qdfm.metrics import dataset_front, preference_sweep, simplex_grid

env = make_env("dst")
data = generate_dataset(env, episodes=1000, seed=0)
front = dataset_front(data)
print("dataset front:", front.tolist())

res = train(TrainConfig(divergence="kl", seed=0), data, env)
sweep = preference_sweep(res.policy, env, simplex_grid(2, 21), episodes=50, seed=0,
                         reference_front=front)
for om, ret in zip(sweep.omegas, sweep.returns):
    print(f"omega_treasure={om[0]:.2f}  treasure={ret[0]:6.2f}  time={ret[1]:6.2f}")
m = sweep.metrics()
print(f"HV ratio {m['hv_ratio']:.3f}  SP {m['sp']:.3f}  ND {m['nd']}")
