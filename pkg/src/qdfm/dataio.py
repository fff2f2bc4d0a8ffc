"""Offline datasets: scripted behavior policies, smoothed behavior model, JSONL I/O."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import DOWN, LEFT, RIGHT, UP, BanditEnv, DiscreteEnv, make_env, rollout

FORMAT_VERSION = "qdfm-data-1"
SMOOTHING = 0.1


class ConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


# -- scripted behavior policies --------------------------------------------

def _fork_corridor(side):
    def policy(env, s, rng):
        r, c = env.cell(s)
        edge = 0 if side == "left" else env.grid_shape[1] - 1
        if r == env.grid_shape[0] - 1 and c != edge:
            return LEFT if side == "left" else RIGHT
        return UP
    return policy


def _dst_diver(target, eps):
    def policy(env, s, rng):
        if eps > 0 and rng.random() < eps:
            return int(rng.integers(4))
        r, c = env.cell(s)
        if c < target[1]:
            return RIGHT
        return DOWN
    return policy


def _toward(env, r, c, goal, avoid=()):
    """Greedy grid step toward ``goal`` that never enters ``avoid`` if it can."""
    options = []
    for a, (dr, dc) in ((UP, (-1, 0)), (DOWN, (1, 0)), (LEFT, (0, -1)), (RIGHT, (0, 1))):
        nr, nc = env.move(r, c, a)
        if (nr, nc) == (r, c) or (nr, nc) in avoid:
            continue
        d = abs(nr - goal[0]) + abs(nc - goal[1])
        options.append((d, a))
    return min(options)[1]


def _resource(kind):
    def policy(env, s, rng):
        r, c = env.cell(s)
        gold, gem = env.flags(s)
        if kind == "random":
            return int(rng.integers(4))
        if kind == "gold":
            goal = env.home if gold else env.gold
            return _toward(env, r, c, goal)
        if kind == "diamond":
            goal = env.home if gem else env.gem
            return _toward(env, r, c, goal, avoid=env.enemies)
        raise ConfigError(f"unknown resource policy {kind!r}")
    return policy


def _safe_resource_policy(env, s, rng):
    r, c = env.cell(s)
    gold, _ = env.flags(s)
    if not gold:
        if c > 1 and r == 4:
            return LEFT
        if c == 1 and r > 0:
            return UP
        return RIGHT
    if c > 1 and r == 0:
        return LEFT
    if c == 1 and r < 4:
        return DOWN
    return RIGHT


def _matrix_coordinated(preferred, p_joint=0.75):
    def policy(env, s, rng):
        if rng.random() < p_joint:
            return int(env.joint_index(np.array([preferred, preferred])))
        return int(env.joint_index(rng.integers(3, size=2)))
    return policy


def _bandit_behavior(env: BanditEnv, s, rng):
    return int(min(np.searchsorted(np.cumsum(env.mu), rng.random(), side="right"),
                   env.n_actions - 1))


def behavior_policies(env: DiscreteEnv, eps=0.05):
    """Named scripted policies available for ``env``."""
    if env.name == "fork":
        return {"left": _fork_corridor("left"), "right": _fork_corridor("right")}
    if env.name == "dst":
        return {f"diver{i}": _dst_diver(rc, eps)
                for i, rc in enumerate(sorted(env.treasures, key=lambda rc: rc[1]))}
    if env.name == "resource":
        return {"gold": _resource("gold"), "diamond": _resource("diamond"),
                "safe": _safe_resource_policy, "random": _resource("random")}
    if env.name == "matrix":
        return {"coord0": _matrix_coordinated(0), "coord1": _matrix_coordinated(1)}
    if env.name == "bandit":
        return {"mu": _bandit_behavior}
    raise ConfigError(f"no behavior policies for {env.name!r}")


def default_mix(env: DiscreteEnv):
    names = list(behavior_policies(env))
    return {n: 1.0 / len(names) for n in names}


# -- dataset container -----------------------------------------------------

@dataclass
class OfflineDataset:
    env: str
    K: int
    agent_sizes: tuple
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    ep: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.agent_sizes = tuple(int(x) for x in self.agent_sizes)
        if len(self.s) == 0:
            raise ValueError("dataset is empty")
        if self.r.ndim != 2 or self.r.shape[1] != self.K:
            raise SchemaError(f"reward vectors must have length K={self.K}")
        if np.any(self.a < 0) or np.any(self.a >= self.n_actions):
            raise SchemaError("action index out of range")

    def __len__(self):
        return len(self.s)

    @property
    def n_actions(self):
        return int(np.prod(self.agent_sizes))

    @property
    def agent_actions(self):
        return np.stack(np.unravel_index(self.a, self.agent_sizes), axis=-1)

    def episode_returns(self):
        n_ep = int(self.ep.max()) + 1
        out = np.zeros((n_ep, self.K))
        np.add.at(out, self.ep, self.r)
        return out

    def batch(self, idx, env):
        """Encoded minibatch for the training code."""
        return {"s": env.encode(self.s[idx]), "a": self.a[idx], "r": self.r[idx],
                "s2": env.encode(self.s2[idx]), "done": self.done[idx].astype(float),
                "s_id": self.s[idx], "s2_id": self.s2[idx]}

    def header(self):
        head = {"env": self.env, "K": self.K, "n_actions": self.n_actions,
                "agent_sizes": list(self.agent_sizes), "version": FORMAT_VERSION,
                "seed": self.meta.get("seed"), "episodes": self.meta.get("episodes")}
        head.update({k: v for k, v in self.meta.items() if k not in head})
        return head


def generate_dataset(env: DiscreteEnv, mix=None, episodes=200, seed=0, eps=0.05):
    """Roll out a weighted mixture of scripted policies; one policy per episode."""
    if episodes <= 0:
        raise ConfigError("episodes must be positive")
    policies = behavior_policies(env, eps)
    mix = default_mix(env) if mix is None else dict(mix)
    unknown = set(mix) - set(policies)
    if unknown:
        raise ConfigError(f"unknown policy name(s) {sorted(unknown)} for {env.name}")
    names = list(mix)
    weights = np.array([mix[n] for n in names], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigError("mixture weights must lie on the simplex")
    rng = np.random.default_rng(seed)
    cols = {k: [] for k in ("s", "a", "r", "s2", "done", "ep")}
    for ep in range(episodes):
        k = int(min(np.searchsorted(np.cumsum(weights), rng.random(), side="right"),
                    len(names) - 1))
        pol = policies[names[k]]
        trace = rollout(env, lambda s, g: pol(env, s, g), rng)
        cols["s"].extend(trace.states)
        cols["a"].extend(trace.actions)
        cols["r"].extend(trace.rewards)
        cols["s2"].extend(trace.next_states)
        cols["done"].extend(trace.dones)
        cols["ep"].extend([ep] * len(trace))
    meta = {"seed": int(seed), "episodes": int(episodes), "mix": mix, "eps": eps,
            "env_kwargs": env.env_kwargs()}
    return OfflineDataset(env.name, env.K, env.agent_sizes,
                          np.array(cols["s"], dtype=np.int64),
                          np.array(cols["a"], dtype=np.int64),
                          np.array(cols["r"], dtype=np.float64).reshape(-1, env.K),
                          np.array(cols["s2"], dtype=np.int64),
                          np.array(cols["done"], dtype=bool),
                          np.array(cols["ep"], dtype=np.int64), meta)


# -- behavior model --------------------------------------------------------

class BehaviorModel:
    """Smoothed per-state action frequencies; unseen states are uniform."""

    def __init__(self, counts, smoothing=SMOOTHING):
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.counts = np.asarray(counts, dtype=np.float64)
        self.smoothing = float(smoothing)
        n_actions = self.counts.shape[1]
        tot = self.counts.sum(axis=1, keepdims=True)
        self.table = (self.counts + smoothing) / (tot + smoothing * n_actions)
        self.seen = tot[:, 0] > 0

    @property
    def n_actions(self):
        return self.table.shape[1]

    def probs(self, states):
        return self.table[np.asarray(states, dtype=np.int64)]

    def sample(self, states, rng):
        p = self.probs(states)
        u = rng.random(p.shape[0])
        idx = np.sum(np.cumsum(p, axis=1) <= u[:, None], axis=1)
        return np.minimum(idx, self.n_actions - 1)

    def support(self):
        return {(int(s), int(a)) for s, a in zip(*np.nonzero(self.counts))}


def fit_behavior(dataset: OfflineDataset, n_states, smoothing=SMOOTHING):
    counts = np.zeros((n_states, dataset.n_actions))
    np.add.at(counts, (dataset.s, dataset.a), 1.0)
    return BehaviorModel(counts, smoothing)


# -- serialization ---------------------------------------------------------

def atomic_write_text(path, text):
    """Write ``text`` to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_dataset(dataset: OfflineDataset, path, force=True):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists")
    multi = len(dataset.agent_sizes) > 1
    acts = dataset.agent_actions if multi else dataset.a
    lines = [_dumps(dataset.header())]
    for i in range(len(dataset)):
        a = [int(x) for x in acts[i]] if multi else int(acts[i])
        lines.append(_dumps({"s": int(dataset.s[i]), "a": a,
                             "r": [float(x) for x in dataset.r[i]],
                             "s2": int(dataset.s2[i]), "done": bool(dataset.done[i]),
                             "ep": int(dataset.ep[i])}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path):
    path = Path(path)
    with open(path) as fh:
        text = fh.read()
    raw_lines = text.split("\n")
    if raw_lines and raw_lines[-1] == "":
        raw_lines.pop()
    if not raw_lines:
        raise DatasetParseError(f"{path}: empty file")
    try:
        head = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}:1: malformed header ({exc.msg})") from None
    for key in ("env", "K", "n_actions"):
        if key not in head:
            raise SchemaError(f"{path}: header missing {key!r}")
    K = int(head["K"])
    sizes = tuple(head.get("agent_sizes") or [head["n_actions"]])
    cols = {k: [] for k in ("s", "a", "r", "s2", "done", "ep")}
    for lineno, line in enumerate(raw_lines[1:], start=2):
        try:
            rec = json.loads(line)
            s, a, r, s2, done = rec["s"], rec["a"], rec["r"], rec["s2"], rec["done"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetParseError(f"{path}:{lineno}: malformed transition ({exc})") from None
        if len(r) != K:
            raise SchemaError(f"{path}:{lineno}: reward has {len(r)} components, header K={K}")
        if isinstance(a, list):
            a = int(np.ravel_multi_index(tuple(a), sizes))
        cols["s"].append(s)
        cols["a"].append(a)
        cols["r"].append(r)
        cols["s2"].append(s2)
        cols["done"].append(done)
        cols["ep"].append(rec.get("ep", 0))
    meta = {k: v for k, v in head.items()
            if k not in ("env", "K", "n_actions", "agent_sizes", "version")}
    return OfflineDataset(head["env"], K, sizes,
                          np.array(cols["s"], dtype=np.int64),
                          np.array(cols["a"], dtype=np.int64),
                          np.array(cols["r"], dtype=np.float64).reshape(-1, K),
                          np.array(cols["s2"], dtype=np.int64),
                          np.array(cols["done"], dtype=bool),
                          np.array(cols["ep"], dtype=np.int64), meta)


def env_for_dataset(dataset: OfflineDataset, **kwargs):
    """Instantiate the environment a dataset was recorded in and check its schema."""
    kwargs = {**dataset.meta.get("env_kwargs", {}), **kwargs}
    try:
        env = make_env(dataset.env, **kwargs)
    except TypeError as exc:
        raise SchemaError(f"dataset environment arguments do not fit {dataset.env}: {exc}") from None
    if env.K != dataset.K or tuple(env.agent_sizes) != tuple(dataset.agent_sizes):
        raise SchemaError(f"dataset schema (K={dataset.K}, actions={dataset.agent_sizes}) "
                          f"does not match env {env.name} (K={env.K}, actions={env.agent_sizes})")
    return env
