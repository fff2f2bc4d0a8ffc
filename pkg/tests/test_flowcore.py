import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdfm.flowcore import (
    ActionSpace, ConditioningZ, GeneratorError, RateField, SimStats, StepSizeError,
    conditional_path_prob, empirical_distribution, euler_run, euler_simulate,
    exact_chain_marginal, project_rates, project_to_valid_rates, sample_conditional_path,
    sample_path, target_generator, target_rate_column,
)
from qdfm.nnet import softplus
from qdfm.theory import alpha_pi_exact, alpha_pi_generator

Z = ConditioningZ(state=None, omega=(0.5, 0.5), a0=0, a1=2)


def test_types_validate():
    with pytest.raises(ValueError):
        ActionSpace(1)
    with pytest.raises(ValueError):
        ActionSpace(6, factors=(2, 2))
    assert ActionSpace(9, factors=(3, 3)).n == 9
    with pytest.raises(ValueError):
        ConditioningZ(None, (0.6, 0.6), 0, 1)


def test_path_endpoints_and_mixture():
    assert np.array_equal(conditional_path_prob(Z, 0.0, 4), [1, 0, 0, 0])
    assert np.array_equal(conditional_path_prob(Z, 1.0, 4), [0, 0, 1, 0])
    np.testing.assert_allclose(conditional_path_prob(Z, 0.3, 4), [0.7, 0, 0.3, 0])
    with pytest.raises(ValueError):
        conditional_path_prob(Z, 1.5, 4)


def test_path_sampling(rng):
    assert sample_conditional_path(Z, 0.0, rng) == 0
    assert sample_conditional_path(Z, 1.0, rng) == 2
    draws = sample_path(np.zeros(100_000, int), np.full(100_000, 2), 0.3, rng)
    assert abs(np.mean(draws == 2) - 0.3) < 0.01


def test_target_column_examples():
    assert np.all(target_rate_column(Z, 0.4, 2, 4).values == 0)
    np.testing.assert_allclose(target_rate_column(Z, 0.5, 0, 4).values, [-2, 0, 2, 0])
    col = target_rate_column(ConditioningZ(None, (1.0,), 0, 1), 0.9, 0, 2).values
    np.testing.assert_allclose(col, [-10, 10])


def test_target_clamps_time():
    col = target_rate_column(Z, 1.0, 0, 3).values
    assert col[2] == pytest.approx(1000.0) and np.isfinite(col).all()


def test_projection_examples():
    col = project_to_valid_rates(np.full(4, -50.0), 1)
    assert np.all(np.abs(col.values) < 1e-20) and col.check()
    col = project_to_valid_rates(np.zeros(3), 0)
    sp0 = float(softplus(np.zeros(1))[0])
    np.testing.assert_allclose(col.values, [-2 * sp0, sp0, sp0])


def test_projection_sums_to_zero(rng):
    raw = rng.normal(scale=10, size=(1000, 6))
    cur = rng.integers(6, size=1000)
    cols = project_rates(raw, cur)
    assert np.max(np.abs(cols.sum(axis=1))) <= 1e-12
    off = cols.copy()
    off[np.arange(1000), cur] = 0
    assert off.min() >= 0


def test_generator_validity_ten_thousand_queries(rng):
    field = RateField(5, 2, (4,), hidden=(16, 16), rng=1)
    n = 10_000
    states = rng.normal(size=(n, 5)) * 3
    omegas = rng.dirichlet(np.ones(2), size=n)
    t = rng.uniform(0, 1 - 1e-3, size=n)
    cur = rng.integers(4, size=n)
    col = field.columns(states, omegas, t, cur)[0]
    assert np.max(np.abs(col.sum(axis=1))) <= 1e-9
    off = col.copy()
    off[np.arange(n), cur] = 0
    assert off.min() >= 0


def test_field_save_load(tmp_path):
    field = RateField(3, 2, (2, 3), hidden=(5,), rng=2)
    field.save(tmp_path / "f.bin")
    back, head = RateField.load(tmp_path / "f.bin")
    assert back.agent_sizes == (2, 3) and back.flatten().tobytes() == field.flatten().tobytes()


def test_regression_gradients_match_finite_differences(rng):
    field = RateField(2, 2, (3,), hidden=(6,), rng=4)
    n = 5
    states, omegas = rng.normal(size=(n, 2)), rng.dirichlet([1, 1], size=n)
    t, acts = rng.uniform(0, 0.9, n), rng.integers(3, size=n)
    targets = [np.abs(rng.normal(size=(n, 3)))]
    w = rng.uniform(0.5, 2, n)
    for div in ("l2", "kl"):
        _, grads = field.regression(states, omegas, t, acts, targets, w, n, div)
        flat = np.concatenate([g.ravel() for g in grads])
        base = field.flatten()
        fd = np.zeros_like(base)
        for i in range(base.size):
            vals = []
            for s in (1, -1):
                p = base.copy()
                p[i] += s * 1e-6
                field.unflatten(p)
                vals.append(field.regression(states, omegas, t, acts, targets, w, n, div)[0])
            fd[i] = (vals[0] - vals[1]) / 2e-6
        field.unflatten(base)
        assert np.max(np.abs(flat - fd)) / np.max(np.abs(fd)) < 1e-5


def test_kolmogorov_reproduces_mixture_path():
    for t in np.round(np.arange(0.1, 1.0, 0.1), 1):
        p = exact_chain_marginal(lambda s: target_generator(2, s, 4), np.eye(4)[0],
                                 substeps=2000, t_end=t)
        np.testing.assert_allclose(p, conditional_path_prob(Z, t, 4), atol=1e-4)


def test_exact_marginal_oracles():
    p0 = np.array([0.2, 0.5, 0.3])
    assert np.array_equal(exact_chain_marginal(lambda t: np.zeros((3, 3)), p0, 1000), p0)
    U = alpha_pi_generator([0.5, 0.3, 0.2], 1.7)
    series, term = p0.copy(), p0.copy()
    for k in range(1, 40):
        term = U @ term / k
        series = series + term
    p = exact_chain_marginal(lambda t: U, p0, 1000)
    np.testing.assert_allclose(p, series, atol=1e-6)
    assert abs(p.sum() - 1) < 1e-8
    np.testing.assert_allclose(p, alpha_pi_exact([0.5, 0.3, 0.2], 1.7, p0), atol=1e-10)


def test_exact_marginal_rejects_bad_generator():
    U = np.array([[-1.0, 0.5], [1.0, -0.5]])
    U[0, 1] = -0.5
    with pytest.raises(GeneratorError, match="column 1"):
        exact_chain_marginal(lambda t: U, np.array([0.5, 0.5]), 1000)
    with pytest.raises(ValueError):
        exact_chain_marginal(lambda t: np.zeros((2, 2)), np.array([1.0, 0]), 10)


def test_frozen_chain_keeps_start(rng):
    a0 = rng.integers(5, size=100)
    out = euler_run(lambda t, cur: np.zeros((len(cur), 5)), a0, 20, rng)
    assert np.array_equal(out, a0)


def test_frozen_field_keeps_start(rng):
    field = RateField(1, 1, (3,), hidden=(4,), rng=0)
    for net in field.nets:
        net.biases[-1][...] = -60.0
        net.weights[-1][...] = 0.0
    a0 = rng.integers(3, size=50)
    out = euler_simulate(field, np.ones((50, 1)), np.ones((50, 1)), a0, 20, rng)
    assert np.array_equal(out, a0)


def test_euler_matches_oracle_alpha5(rng):
    pi = np.array([0.7, 0.3])
    U = alpha_pi_generator(pi, 5.0)
    a0 = np.ones(100_000, dtype=int)
    ends = euler_run(lambda t, cur: U[:, cur].T, a0, 20, rng)
    exact = exact_chain_marginal(lambda t: U, np.array([0.0, 1.0]), 1000)
    assert 0.5 * np.abs(empirical_distribution(ends, 2) - exact).sum() <= 0.02


def test_euler_converges_for_random_generator(rng):
    n = 4
    U = rng.uniform(0, 2, size=(n, n))
    np.fill_diagonal(U, 0)
    np.fill_diagonal(U, -U.sum(axis=0))
    p0 = rng.dirichlet(np.ones(n))
    a0 = rng.choice(n, size=100_000, p=p0)
    ends = euler_run(lambda t, cur: U[:, cur].T, a0, 100, rng)
    exact = exact_chain_marginal(lambda t: U, p0, 1000)
    assert 0.5 * np.abs(empirical_distribution(ends, n) - exact).sum() <= 0.02


def test_clamp_counter_and_strict(rng):
    U = alpha_pi_generator([0.5, 0.5], 100.0)
    stats = SimStats()
    euler_run(lambda t, cur: U[:, cur].T, np.zeros(10, int), 5, rng, stats=stats)
    assert stats.clamped > 0 and stats.steps == 5
    with pytest.raises(StepSizeError):
        euler_run(lambda t, cur: U[:, cur].T, np.zeros(10, int), 5, rng, strict=True)


def test_absorption_under_target_generator(rng):
    def rate_fn(t, cur):
        return np.array([target_generator(1, t, 3)[:, c] for c in cur])
    a0 = rng.integers(3, size=5000)
    for n_steps in (5, 20, 50):
        traj = a0.copy()
        h = 1.0 / n_steps
        for k in range(n_steps):
            nxt = euler_run(lambda s, cur: rate_fn(k * h + s * h, cur), traj, 1, rng)
            assert np.all(nxt[traj == 1] == 1)
            traj = nxt


def test_single_uniform_per_step():
    class Counting:
        def __init__(self):
            self.inner = np.random.default_rng(0)
            self.calls = 0

        def random(self, n):
            self.calls += 1
            return self.inner.random(n)

    r = Counting()
    euler_run(lambda t, cur: np.zeros((len(cur), 3)), np.zeros(7, int), 12, r)
    assert r.calls == 12


@given(st.integers(0, 2**31), st.integers(2, 5), st.floats(0.0, 0.999))
@settings(max_examples=50, deadline=None)
def test_target_columns_are_valid(seed, n, t):
    rng = np.random.default_rng(seed)
    a1, cur = rng.integers(n, size=2)
    col = target_rate_column(ConditioningZ(None, (1.0,), 0, int(a1)), t, int(cur), n)
    assert col.check()
