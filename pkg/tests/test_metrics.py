import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdfm.envs import EpisodeTrace, make_env
from qdfm.metrics import (
    SweepResult, UnsupportedDimensionError, count_nondominated, hypervolume, pareto_filter,
    preference_sweep, simplex_grid, spacing, tv_distance, visitation_heatmap,
)


def brute_front(P):
    P = [tuple(p) for p in np.unique(np.asarray(P, float), axis=0)]
    keep = [p for p in P if not any(all(q[k] >= p[k] for k in range(len(p))) and q != p
                                    for q in P)]
    return sorted(keep)


def as_set(P):
    return sorted(tuple(p) for p in np.asarray(P))


def mc_volume(P, ref, n, rng):
    P = np.asarray(P)
    hi = P.max(axis=0)
    X = rng.uniform(ref, hi, size=(n, len(ref)))
    dominated = np.zeros(n, bool)
    for p in P:
        dominated |= np.all(X <= p, axis=1)
    return dominated.mean() * np.prod(hi - ref)


def test_pareto_examples():
    assert as_set(pareto_filter([(1, 0), (0, 1)])) == [(0, 1), (1, 0)]
    assert as_set(pareto_filter([(2, 2), (1, 1)])) == [(2, 2)]
    assert as_set(pareto_filter([(1, 1), (1, 1)])) == [(1, 1)]
    with pytest.raises(ValueError):
        pareto_filter([(1, 2), (1, 2, 3)])


def test_pareto_matches_brute_force(rng):
    for _ in range(20):
        P = rng.integers(0, 6, size=(50, 3)).astype(float)
        assert as_set(pareto_filter(P)) == brute_front(P)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_pareto_idempotent(points):
    once = pareto_filter(points)
    assert np.array_equal(pareto_filter(once), once)
    assert as_set(once) == brute_front(points)


def test_hypervolume_examples():
    assert hypervolume([(3, 4)], (0, 0)) == 12
    assert hypervolume([(2, 1), (1, 2)], (0, 0)) == 3
    assert hypervolume([(2, 1), (1, 2), (1, 1)], (0, 0)) == 3
    assert hypervolume([(1, 1, 1)], (0, 0, 0)) == 1
    with pytest.raises(UnsupportedDimensionError):
        hypervolume([(1, 1, 1, 1)], (0, 0, 0, 0))
    with pytest.raises(ValueError):
        hypervolume([(1, 1)], (0, 0, 0))


def test_hypervolume_clips_to_reference():
    assert hypervolume([(-1, 5), (2, 2)], (0, 0)) == 4


def test_hv2_matches_monte_carlo(rng):
    P = rng.uniform(0, 1, size=(6, 2))
    est = mc_volume(P, np.zeros(2), 10**6, rng)
    assert abs(hypervolume(P, (0, 0)) - est) / est < 0.01


def test_hv3_matches_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(3):
        P = rng.uniform(0, 1, size=(5, 3))
        est = mc_volume(P, np.zeros(3), 10**6, rng)
        assert abs(hypervolume(P, (0, 0, 0)) - est) / est < 0.01


@given(st.integers(0, 2**31), st.integers(2, 3))
@settings(max_examples=50, deadline=None)
def test_hypervolume_monotone(seed, K):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 1, size=(rng.integers(1, 7), K))
    base = hypervolume(P, np.zeros(K))
    extra = rng.uniform(0, 1, size=K)
    assert hypervolume(np.vstack([P, extra]), np.zeros(K)) >= base - 1e-12
    dominated = P[0] * rng.uniform(0, 1, size=K)
    assert hypervolume(np.vstack([P, dominated]), np.zeros(K)) == pytest.approx(base, abs=1e-12)


def test_spacing_examples(rng):
    assert spacing([(0, 4), (1, 3), (2, 2), (3, 1)]) == 0
    assert spacing([(0, 1), (5, 0)]) == 0
    assert np.isnan(spacing([(1, 1)]))
    P = rng.normal(size=(5, 2))
    d = [min(np.abs(P[i] - P[j]).sum() for j in range(5) if j != i) for i in range(5)]
    assert spacing(P) == pytest.approx(np.sqrt(np.mean((np.array(d) - np.mean(d)) ** 2)))


def test_nondominated_count_rounds():
    assert count_nondominated([(1, 0), (1 + 1e-9, 0), (0, 1)]) == 2


def test_tv_examples():
    assert tv_distance([0.3, 0.7], [0.3, 0.7]) == 0
    assert tv_distance([1, 0], [0, 1]) == 1
    assert tv_distance([0.7, 0.3], [0.5, 0.5]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        tv_distance([1, 0], [1, 0, 0])


@given(st.integers(0, 2**31), st.integers(2, 6))
@settings(max_examples=100, deadline=None)
def test_tv_metric_properties(seed, n):
    rng = np.random.default_rng(seed)
    p, q, r = rng.dirichlet(np.ones(n), size=3)
    assert tv_distance(p, q) == pytest.approx(tv_distance(q, p))
    assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12
    assert 0 <= tv_distance(p, q) <= 1


class ConstantPolicy:
    def __init__(self, action, sizes=(4,)):
        self.action = action
        self.agent_sizes = sizes

    def act(self, state_ids, omegas, rng, stats=None):
        return np.full(len(state_ids), self.action)


def test_constant_policy_sweep_has_one_point(tmp_path):
    env = make_env("dst")
    sw = preference_sweep(ConstantPolicy(1), env, simplex_grid(2, 5), episodes=3, seed=0)
    assert sw.nd == 1 and np.allclose(sw.returns[0], (0.7, -1.0))
    sw.to_json(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["metrics"]["nd"] == 1 and doc["metrics"]["sp"] is None
    sw.to_csv(tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 6


def test_sweep_guards():
    env = make_env("dst")
    with pytest.raises(ValueError):
        preference_sweep(ConstantPolicy(0), env, [(1.0, 0.0)], episodes=1)
    with pytest.raises(ValueError):
        preference_sweep(ConstantPolicy(0, (3, 3)), env, simplex_grid(2, 3), episodes=1)
    with pytest.raises(ValueError):
        preference_sweep(ConstantPolicy(0), env, simplex_grid(3, 3), episodes=1)
    with pytest.raises(ValueError):
        SweepResult(np.array([[1.0, 0], [1.0, 0]]), np.zeros((2, 2)), 1, np.zeros(2))


def test_dataset_front_ratio_is_one():
    front = np.array([(0.7, -1.0), (8.2, -3.0), (11.5, -5.0)])
    sw = SweepResult(np.array([[1, 0], [0.5, 0.5], [0, 1.0]]), front, 1, np.array([0.0, -50]),
                     front)
    assert sw.hv_ratio == 1.0


def test_simplex_grid():
    g = simplex_grid(2, 21)
    assert g.shape == (21, 2) and tuple(g[0]) == (1, 0) and tuple(g[-1]) == (0, 1)
    g3 = simplex_grid(3, 4)
    assert len(g3) == 10 and np.allclose(g3.sum(axis=1), 1)


def test_heatmap_counts():
    tr = EpisodeTrace(states=[0, 1, 2], actions=[3, 3, 3], rewards=[0, 0, 0],
                      next_states=[1, 2, 3], dones=[False, False, True])
    H = visitation_heatmap([tr], (2, 2))
    assert H.sum() == 3 and np.count_nonzero(H) == 3
    H2 = visitation_heatmap([tr, tr], (2, 2), count="departed")
    assert H2.sum() == 6 and H2[0, 0] == 2
    with pytest.raises(ValueError):
        visitation_heatmap([tr], None)
