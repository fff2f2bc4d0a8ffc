"""Small discrete multi-objective environments.

States are integer ids; :meth:`DiscreteEnv.encode` turns them into one-hot
vectors.  Actions handed to :meth:`DiscreteEnv.step` are flat joint indices;
for factored environments ``joint_index``/``split`` convert to and from the
per-agent tuple (row-major, agent 0 most significant).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


class DiscreteEnv:
    name = "env"
    n_states: int
    agent_sizes: tuple
    K: int
    max_steps: int
    grid_shape = None
    hv_reference = None
    deterministic = True

    @property
    def n_actions(self):
        return int(np.prod(self.agent_sizes))

    @property
    def n_agents(self):
        return len(self.agent_sizes)

    @property
    def state_dim(self):
        return self.n_states

    def encode(self, states):
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        out = np.zeros((states.shape[0], self.n_states))
        out[np.arange(states.shape[0]), states] = 1.0
        return out

    def joint_index(self, actions):
        actions = np.asarray(actions)
        if actions.ndim == 1 and self.n_agents == 1:
            return actions
        if actions.ndim == 1:
            return np.ravel_multi_index(tuple(actions), self.agent_sizes)
        return np.ravel_multi_index(tuple(actions.T), self.agent_sizes)

    def split(self, index):
        index = np.asarray(index)
        return np.stack(np.unravel_index(index, self.agent_sizes), axis=-1)

    def reset(self, rng):
        raise NotImplementedError

    def step(self, state, action, rng):
        raise NotImplementedError

    def cell(self, state):
        """Grid coordinates of a state (gridworlds only)."""
        raise NotImplementedError(f"{self.name} is not a gridworld")

    def env_kwargs(self):
        """Constructor arguments needed to rebuild this environment."""
        return {}

    def describe(self):
        return {"env": self.name, "K": self.K, "n_actions": self.n_actions,
                "agent_sizes": list(self.agent_sizes), "n_states": self.n_states}


class GridEnv(DiscreteEnv):
    agent_sizes = (4,)

    def __init__(self, rows, cols):
        self.grid_shape = (rows, cols)

    def cell(self, state):
        return divmod(int(state), self.grid_shape[1])

    def index(self, r, c):
        return r * self.grid_shape[1] + c

    def move(self, r, c, action, blocked=()):
        dr, dc = _MOVES[int(action)]
        nr, nc = r + dr, c + dc
        rows, cols = self.grid_shape
        if not (0 <= nr < rows and 0 <= nc < cols) or (nr, nc) in blocked:
            return r, c
        return nr, nc


class ForkEnv(GridEnv):
    """7-wide, 5-tall grid with two goals in the top corners and a central trap.

    Row 0 is the top row.  The start is bottom-center; the trap sits on the
    straight line between the start and the midpoint of the two goals.
    """

    name = "fork"
    K = 2
    max_steps = 30
    hv_reference = (-60.0, -60.0)

    def __init__(self):
        super().__init__(5, 7)
        self.n_states = 35
        self.start = (4, 3)
        self.goal_a = (0, 0)
        self.goal_b = (0, 6)
        self.trap = (2, 3)
        self.trap_state = self.index(*self.trap)

    def reset(self, rng):
        return self.index(*self.start)

    def step(self, state, action, rng=None):
        r, c = self.move(*self.cell(state), action)
        nxt = self.index(r, c)
        if (r, c) == self.goal_a:
            return nxt, np.array([10.0, 0.0]), True
        if (r, c) == self.goal_b:
            return nxt, np.array([0.0, 10.0]), True
        if (r, c) == self.trap:
            return nxt, np.array([-50.0, -50.0]), True
        return nxt, np.zeros(2), False


DST_MAP = np.array([
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0.7, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [-10, 8.2, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [-10, -10, 11.5, 0, 0, 0, 0, 0, 0, 0, 0],
    [-10, -10, -10, 14.0, 15.1, 16.1, 0, 0, 0, 0, 0],
    [-10, -10, -10, -10, -10, -10, 0, 0, 0, 0, 0],
    [-10, -10, -10, -10, -10, -10, 0, 0, 0, 0, 0],
    [-10, -10, -10, -10, -10, -10, 19.6, 20.3, 0, 0, 0],
    [-10, -10, -10, -10, -10, -10, -10, -10, 0, 0, 0],
    [-10, -10, -10, -10, -10, -10, -10, -10, 22.4, 0, 0],
    [-10, -10, -10, -10, -10, -10, -10, -10, -10, 23.7, 0],
])


class DeepSeaTreasureEnv(GridEnv):
    """Ten-treasure Deep-Sea-Treasure; objectives (treasure, -1 per step).

    Cells marked -10 are sea floor and block movement.  The submarine starts
    in the top-left corner and the episode ends on any treasure.
    """

    name = "dst"
    K = 2
    max_steps = 50
    hv_reference = (0.0, -50.0)

    def __init__(self, sea_map=DST_MAP):
        self.sea_map = np.asarray(sea_map, dtype=float)
        super().__init__(*self.sea_map.shape)
        self.n_states = self.sea_map.size
        self.floor = {tuple(rc) for rc in np.argwhere(self.sea_map < 0)}
        self.treasures = {tuple(rc): float(self.sea_map[tuple(rc)])
                          for rc in np.argwhere(self.sea_map > 0)}

    def reset(self, rng):
        return 0

    def step(self, state, action, rng=None):
        r, c = self.move(*self.cell(state), action, blocked=self.floor)
        value = self.treasures.get((r, c), 0.0)
        return self.index(r, c), np.array([value, -1.0]), (r, c) in self.treasures

    def pareto_set(self):
        """Optimal (treasure, -time) pairs found by breadth-first search."""
        from collections import deque
        rows, cols = self.grid_shape
        dist = {(0, 0): 0}
        queue = deque([(0, 0)])
        while queue:
            r, c = queue.popleft()
            if (r, c) in self.treasures:
                continue
            for a in _MOVES:
                nr, nc = self.move(r, c, a, blocked=self.floor)
                if (nr, nc) not in dist:
                    dist[(nr, nc)] = dist[(r, c)] + 1
                    queue.append((nr, nc))
        points = [(v, -float(dist[rc])) for rc, v in self.treasures.items() if rc in dist]
        best = [p for p in points
                if not any(q[0] >= p[0] and q[1] >= p[1] and q != p for q in points)]
        return sorted(best)


class ResourceGatheringEnv(GridEnv):
    """5x5 resource gathering: gold, diamond, two enemy cells, home row.

    State id = cell + 25 * (has_gold + 2 * has_gem).  Entering an enemy cell
    ends the episode with safety -1 with probability ``attack_prob``.
    Returning home while carrying anything banks it and ends the episode.
    """

    name = "resource"
    K = 3
    max_steps = 30
    hv_reference = (0.0, 0.0, -1.5)
    deterministic = False

    def __init__(self, attack_prob=0.1):
        super().__init__(5, 5)
        self.n_states = 100
        self.attack_prob = float(attack_prob)
        self.home = (4, 2)
        self.gold = (0, 2)
        self.gem = (1, 4)
        self.enemies = {(0, 3), (1, 2)}

    def cell(self, state):
        return divmod(int(state) % 25, 5)

    def flags(self, state):
        inv = int(state) // 25
        return inv & 1, inv >> 1

    def pack(self, r, c, gold, gem):
        return r * 5 + c + 25 * (gold + 2 * gem)

    def env_kwargs(self):
        return {"attack_prob": self.attack_prob}

    def reset(self, rng):
        return self.pack(*self.home, 0, 0)

    def step(self, state, action, rng):
        gold, gem = self.flags(state)
        r, c = self.move(*self.cell(state), action)
        if (r, c) in self.enemies and rng.random() < self.attack_prob:
            return self.pack(r, c, 0, 0), np.array([0.0, 0.0, -1.0]), True
        if (r, c) == self.gold:
            gold = 1
        if (r, c) == self.gem:
            gem = 1
        nxt = self.pack(r, c, gold, gem)
        if (r, c) == self.home and (gold or gem):
            return nxt, np.array([float(gold), float(gem), 0.0]), True
        return nxt, np.zeros(3), False


class MatrixGameEnv(DiscreteEnv):
    """One-step two-agent game with a context bit and actions {0, 1, 2}.

    Task reward: 8 for matching actions, +2 more when the matched action
    equals the context.  Safety reward: +1 per agent avoiding the costly
    action 2, -4 per agent playing it, and -6 when the agents coordinate on
    a non-costly action.
    """

    name = "matrix"
    K = 2
    max_steps = 1
    agent_sizes = (3, 3)
    hv_reference = (-10.0, -10.0)
    n_states = 2

    def reset(self, rng):
        return int(rng.integers(2))

    def rewards(self, state, a1, a2):
        match = a1 == a2
        r1 = 8.0 * match + 2.0 * (match and a1 == state)
        r2 = sum(-4.0 if a == 2 else 1.0 for a in (a1, a2)) - 6.0 * (match and a1 != 2)
        return np.array([r1, r2])

    def step(self, state, action, rng=None):
        a1, a2 = (int(x) for x in self.split(action))
        return int(state), self.rewards(int(state), a1, a2), True


class BanditEnv(DiscreteEnv):
    """Single-state bandit whose reward vector is a row of ``q_true``."""

    name = "bandit"
    max_steps = 1
    n_states = 1

    def __init__(self, mu, q_true):
        mu = np.asarray(mu, dtype=float)
        q = np.asarray(q_true, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        if q.shape[0] != mu.shape[0]:
            raise ValueError(f"{mu.shape[0]} arms in mu but {q.shape[0]} rows in q_true")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-9:
            raise ValueError("mu must lie on the simplex")
        self.mu = mu
        self.q_true = q
        self.K = q.shape[1]
        self.agent_sizes = (mu.shape[0],)
        self.hv_reference = tuple(float(x) - 1.0 for x in q.min(axis=0))

    def env_kwargs(self):
        return {"mu": self.mu.tolist(), "q_true": self.q_true.tolist()}

    def reset(self, rng):
        return 0

    def step(self, state, action, rng=None):
        return 0, self.q_true[int(action)].copy(), True


def bandit_env(mu, q_true):
    return BanditEnv(mu, q_true)


def fork_env():
    return ForkEnv()


def dst_env():
    return DeepSeaTreasureEnv()


def resource_env(attack_prob=0.1):
    return ResourceGatheringEnv(attack_prob)


def matrix_game_env():
    return MatrixGameEnv()


REGISTRY = {
    "fork": fork_env,
    "dst": dst_env,
    "resource": resource_env,
    "matrix": matrix_game_env,
    "bandit": lambda mu=(0.5, 0.5), q_true=(1.0, 0.0): bandit_env(mu, q_true),
}


def make_env(name, **kwargs):
    try:
        return REGISTRY[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(REGISTRY)}") from None


@dataclass
class EpisodeTrace:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    next_states: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    @property
    def ret(self):
        return np.sum(self.rewards, axis=0)

    def visits(self):
        counts = {}
        for s in self.states:
            counts[s] = counts.get(s, 0) + 1
        return counts


def rollout(env, policy, rng, state=None):
    """Run one episode; ``policy(state, rng)`` returns a flat joint action."""
    trace = EpisodeTrace()
    s = env.reset(rng) if state is None else state
    for _ in range(env.max_steps):
        a = int(policy(s, rng))
        s2, r, done = env.step(s, a, rng)
        trace.states.append(s)
        trace.actions.append(a)
        trace.rewards.append(r)
        trace.next_states.append(s2)
        trace.dones.append(bool(done))
        s = s2
        if done:
            break
    return trace
