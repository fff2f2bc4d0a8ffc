from collections import deque

import numpy as np
import pytest

from qdfm.critic import TabularCritic, bellman_target
from qdfm.dataio import generate_dataset
from qdfm.envs import (
    DOWN, LEFT, RIGHT, UP, EpisodeTrace, bandit_env, dst_env, fork_env, make_env,
    matrix_game_env, resource_env, rollout,
)


def play(env, state, actions, rng=None):
    trace = EpisodeTrace()
    for a in actions:
        s2, r, done = env.step(state, a, rng)
        trace.states.append(state)
        trace.actions.append(a)
        trace.rewards.append(r)
        trace.next_states.append(s2)
        trace.dones.append(done)
        state = s2
        if done:
            break
    return trace


def test_fork_goals_and_trap():
    env = fork_env()
    s, r, done = env.step(env.index(0, 1), LEFT)
    assert tuple(r) == (10, 0) and done
    s, r, done = env.step(env.index(1, 6), UP)
    assert tuple(r) == (0, 10) and done
    s, r, done = env.step(env.index(3, 3), UP)
    assert tuple(r) == (-50, -50) and done and s == env.trap_state
    s, r, done = env.step(env.index(4, 0), LEFT)
    assert s == env.index(4, 0) and not done and tuple(r) == (0, 0)


def _bfs(env, start, goal, blocked=()):
    dist = {start: 0}
    q = deque([start])
    while q:
        cur = q.popleft()
        for a in (UP, DOWN, LEFT, RIGHT):
            nxt = env.move(*cur, a, blocked=blocked)
            if nxt not in dist:
                dist[nxt] = dist[cur] + 1
                q.append(nxt)
    return dist.get(goal, np.inf)


def test_fork_trap_blocks_every_shortest_path_to_midpoint():
    env = fork_env()
    mid = (0, (env.goal_a[1] + env.goal_b[1]) // 2)
    assert _bfs(env, env.start, mid, blocked={env.trap}) > _bfs(env, env.start, mid)


def test_fork_corridor_data_avoids_trap():
    env = fork_env()
    ds = generate_dataset(env, {"left": 0.5, "right": 0.5}, episodes=200, seed=0)
    assert not np.any(ds.s2 == env.trap_state)
    ds = generate_dataset(env, {"left": 1.0}, episodes=20, seed=1)
    assert not np.any(ds.s2 == env.trap_state)


def test_dst_immediate_dive():
    env = dst_env()
    tr = play(env, 0, [DOWN])
    assert tuple(tr.ret) == (0.7, -1.0)


def test_dst_time_objective_is_minus_length(rng):
    env = dst_env()
    for _ in range(20):
        tr = rollout(env, lambda s, g: int(g.integers(4)), rng)
        assert tr.ret[1] == -len(tr)


def test_dst_pareto_set_matches_canonical_front():
    canonical = [(0.7, -1), (8.2, -3), (11.5, -5), (14.0, -7), (15.1, -8), (16.1, -9),
                 (19.6, -13), (20.3, -14), (22.4, -17), (23.7, -19)]
    assert make_env("dst").pareto_set() == [(v, float(t)) for v, t in canonical]


def test_resource_safe_and_banking(rng):
    env = resource_env()
    home = env.reset(rng)
    path = [LEFT, LEFT, UP, UP, UP, UP, RIGHT, RIGHT, LEFT, LEFT, DOWN, DOWN, DOWN, DOWN,
            RIGHT, RIGHT]
    tr = play(env, home, path, rng)
    assert tr.dones[-1] and tuple(tr.ret) == (1.0, 0.0, 0.0)


def test_resource_enemy_penalty_rate():
    env = resource_env()
    rng = np.random.default_rng(7)
    # up through the enemy below the gold, back down the safe column
    path = [UP, UP, UP, UP, LEFT, DOWN, DOWN, DOWN, DOWN, RIGHT]
    safety = [play(env, env.reset(rng), path, rng).ret[2] for _ in range(10_000)]
    assert abs(np.mean(safety) + 0.1) <= 0.01


def test_matrix_rewards():
    env = matrix_game_env()
    assert env.rewards(0, 0, 0)[0] == 10
    assert env.rewards(1, 0, 1)[0] == 0
    assert env.rewards(0, 2, 2)[1] == -8
    s, r, done = env.step(1, int(env.joint_index(np.array([1, 1]))))
    assert done and r[0] == 10
    assert tuple(env.split(env.joint_index(np.array([2, 1])))) == (2, 1)


def test_bandit_env():
    env = bandit_env([0.5, 0.5], [1.0, 0.0])
    assert tuple(env.step(0, 0)[1]) == (1.0,)
    with pytest.raises(ValueError):
        bandit_env([0.5, 0.5], [1.0, 0.0, 3.0])
    with pytest.raises(ValueError):
        bandit_env([0.6, 0.6], [1.0, 0.0])
    critic = TabularCritic([[1.0], [0.0]], gamma=0.9)
    y = bellman_target(critic, [[0.3]], env.encode([0]), [True], [[0, 1]], [[1.0]])
    assert y[0] == pytest.approx(0.3)


@pytest.mark.parametrize("name", ["fork", "dst", "matrix"])
def test_deterministic_envs(name, rng):
    env = make_env(name)
    for _ in range(200):
        s = int(rng.integers(env.n_states))
        a = int(rng.integers(env.n_actions))
        a1, b1 = env.step(s, a, rng), env.step(s, a, rng)
        assert a1[0] == b1[0] and np.array_equal(a1[1], b1[1]) and a1[2] == b1[2]


@pytest.mark.parametrize("name", ["fork", "dst", "resource", "matrix", "bandit"])
def test_reward_dimension_and_trace(name, rng):
    env = make_env(name)
    for _ in range(20):
        tr = rollout(env, lambda s, g: int(g.integers(env.n_actions)), rng)
        assert all(len(r) == env.K for r in tr.rewards)
        assert len(tr) <= env.max_steps
        assert sum(tr.visits().values()) == len(tr)
        np.testing.assert_array_equal(tr.ret, np.sum(tr.rewards, axis=0))


def test_encoding_is_one_hot():
    env = make_env("fork")
    X = env.encode([0, 5, 34])
    assert X.shape == (3, 35) and np.array_equal(X.argmax(axis=1), [0, 5, 34])
    assert np.all(X.sum(axis=1) == 1)


def test_unknown_env():
    with pytest.raises(KeyError):
        make_env("cartpole")
