"""The two exact checks behind the method, small enough to enumerate.

1. Weighted conditional and marginal regressions share their gradient when
   the weights ignore the parameters, and stop sharing it when they don't.
2. The Euler sampler reproduces the closed-form law of u = alpha * pi.
"""
from qdfm.theory import (TinyInstance, gradient_equivalence_check, random_weights,
                         sampler_check, theta_dependent_weights, unit_weights)

inst = TinyInstance(n_actions=3, n_nodes=16)
field = inst.make_field(seed=3)
for label, fn in (("unit", unit_weights), ("random", random_weights(3, seed=3)),
                  ("theta-dependent", theta_dependent_weights(inst))):
    print(f"{label:16s} gap {gradient_equivalence_check(field, fn, inst):.2e}")

for c in sampler_check(alphas=(0.0, 1.0, 5.0, 20.0), step_counts=(10, 20, 100)):
    print(f"alpha={c.alpha:5.1f} N={c.n_steps:3d} TV exact {c.tv_exact:.4f} "
          f"TV pi {c.tv_target:.4f} clamped {c.clamped}")
