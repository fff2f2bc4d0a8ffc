import numpy as np
import pytest

from qdfm.theory import (
    QuadratureError, TinyInstance, alpha_pi_exact, alpha_pi_generator, gradient_equivalence_check,
    guided_losses, random_weights, sampler_check, theta_dependent_weights, unit_weights,
)
from qdfm.flowcore import exact_chain_marginal


def test_unit_weights_gap():
    assert gradient_equivalence_check(weight_fn=unit_weights) <= 1e-8


def test_random_weights_gap():
    inst = TinyInstance()
    assert gradient_equivalence_check(inst.make_field(seed=3), random_weights(3, seed=3),
                                      inst) <= 1e-6


def test_four_actions_skewed_marginals():
    inst = TinyInstance(n_actions=4, p0=[0.1, 0.2, 0.3, 0.4], p1=[0.5, 0.25, 0.2, 0.05],
                        n_nodes=8)
    assert gradient_equivalence_check(inst.make_field(seed=1), random_weights(4, seed=1),
                                      inst) <= 1e-6


def test_theta_dependent_weights_break_equivalence():
    inst = TinyInstance()
    gap = gradient_equivalence_check(inst.make_field(seed=3), theta_dependent_weights(inst), inst)
    assert gap > 1e-3


def test_losses_differ_by_a_constant():
    # conditional and marginal losses differ by a parameter-free variance term
    inst = TinyInstance()
    w = random_weights(3, seed=4)
    f1, f2 = inst.make_field(seed=1), inst.make_field(seed=2)
    c1, m1 = guided_losses(f1, w, inst)
    c2, m2 = guided_losses(f2, w, inst)
    assert c1 - m1 == pytest.approx(c2 - m2, rel=1e-9)
    assert c1 >= m1


def test_quadrature_guard():
    with pytest.raises(QuadratureError):
        gradient_equivalence_check(instance=TinyInstance(n_nodes=1))
    with pytest.raises(QuadratureError):
        gradient_equivalence_check(instance=TinyInstance(n_nodes=64))
    with pytest.raises(ValueError):
        TinyInstance(n_actions=5)


def test_alpha_pi_closed_form():
    pi, p0 = np.array([0.7, 0.2, 0.1]), np.array([0.0, 0.0, 1.0])
    U = alpha_pi_generator(pi, 3.0)
    assert np.allclose(U.sum(axis=0), 0)
    np.testing.assert_allclose(exact_chain_marginal(lambda t: U, p0, 1000),
                               alpha_pi_exact(pi, 3.0, p0), atol=1e-10)


def test_sampler_check_cells():
    cells = sampler_check(alphas=(0.0, 5.0), n_samples=20_000, seed=1)
    assert cells[0].tv_exact == 0.0 and cells[0].tv_target == pytest.approx(0.7)
    assert cells[1].tv_exact <= 0.02 and cells[1].clamped == 0
