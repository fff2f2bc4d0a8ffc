"""Vector-valued critics and the scalarized soft Bellman backup."""
from __future__ import annotations

import numpy as np

from .flowcore import one_hot
from .nnet import Adam, DenseNet, load_params, save_params


def _softmax_weights(q, beta):
    z = beta * np.asarray(q, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_average(q, beta):
    """``sum_j softmax(beta q)_j q_j`` along the last axis (max-subtracted)."""
    q = np.asarray(q, dtype=np.float64)
    return np.sum(_softmax_weights(q, beta) * q, axis=-1)


class VectorCritic:
    """Dense critic ``(state, [omega], joint action) -> K values``.

    Actions are flat joint indices in ``range(n_actions)``.  When
    ``condition_on_preference`` is set the preference vector is appended to
    the input, otherwise the same vector estimate is shared by every omega.
    """

    def __init__(self, state_dim, n_actions, n_objectives, gamma=0.99, beta=20.0,
                 hidden=(64, 64), activation="tanh", condition_on_preference=True,
                 rng=None):
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {gamma}")
        if beta <= 0:
            raise ValueError("guidance scale must be positive")
        self.state_dim = int(state_dim)
        self.n_actions = int(n_actions)
        self.n_objectives = int(n_objectives)
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.hidden = tuple(hidden)
        self.activation = activation
        self.condition_on_preference = bool(condition_on_preference)
        in_dim = self.state_dim + self.n_actions
        if self.condition_on_preference:
            in_dim += self.n_objectives
        self.net = DenseNet([in_dim, *self.hidden, self.n_objectives],
                            activation=activation, rng=rng)

    def params(self):
        return self.net.params()

    def block_names(self):
        return [f"critic.{n}" for n in self.net.block_names()]

    def copy(self):
        other = VectorCritic.__new__(VectorCritic)
        other.__dict__.update(self.__dict__)
        other.net = self.net.copy()
        return other

    def features(self, states, omegas, actions):
        actions = np.asarray(actions)
        n = actions.shape[0]
        parts = [np.asarray(states, dtype=np.float64).reshape(n, self.state_dim)]
        if self.condition_on_preference:
            parts.append(np.asarray(omegas, dtype=np.float64).reshape(n, self.n_objectives))
        parts.append(one_hot(actions, self.n_actions))
        return np.concatenate(parts, axis=1)

    def values(self, states, omegas, actions):
        return self.net.forward(self.features(states, omegas, actions))

    def scalar(self, states, omegas, actions):
        omegas = np.asarray(omegas, dtype=np.float64).reshape(len(actions), self.n_objectives)
        return np.sum(self.values(states, omegas, actions) * omegas, axis=1)

    def header(self):
        return {"kind": "vector_critic", "state_dim": self.state_dim,
                "n_actions": self.n_actions, "K": self.n_objectives, "gamma": self.gamma,
                "beta": self.beta, "hidden": list(self.hidden), "activation": self.activation,
                "condition_on_preference": self.condition_on_preference,
                "widths": self.net.widths, "version": "qdfm-net-1"}

    def save(self, path, binary=True):
        save_params(path, self.header(), self.net.flatten(), binary=binary)

    @classmethod
    def load(cls, path):
        head, flat = load_params(path)
        if head.get("kind") != "vector_critic":
            raise ValueError(f"{path} is not a critic checkpoint")
        critic = cls(head["state_dim"], head["n_actions"], head["K"], gamma=head["gamma"],
                     beta=head["beta"], hidden=head["hidden"], activation=head["activation"],
                     condition_on_preference=head["condition_on_preference"], rng=0)
        critic.net.unflatten(flat)
        return critic


class TabularCritic:
    """Exact critic backed by a ``(n_states, n_actions, K)`` table.

    States are passed as one-hot encodings (the same encodings the networks
    see); the table row is the encoding's argmax.
    """

    def __init__(self, table, gamma=0.0, beta=20.0):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim == 2:
            table = table[None]
        self.table = table
        self.n_actions = table.shape[1]
        self.n_objectives = table.shape[2]
        self.gamma = float(gamma)
        self.beta = float(beta)

    def values(self, states, omegas, actions):
        states = np.asarray(states, dtype=np.float64).reshape(len(actions), -1)
        return self.table[np.argmax(states, axis=1), np.asarray(actions)]

    def scalar(self, states, omegas, actions):
        omegas = np.asarray(omegas, dtype=np.float64).reshape(len(actions), self.n_objectives)
        return np.sum(self.values(states, omegas, actions) * omegas, axis=1)


def scalarize(critic, state, action, omega):
    return float(critic.scalar(np.asarray(state)[None], np.asarray(omega)[None],
                               np.array([action]))[0])


def soft_value(critic, next_states, support, omegas, beta=None):
    """In-support soft value for a batch.

    ``support`` is ``(n, M)`` candidate actions per next state.
    """
    beta = critic.beta if beta is None else beta
    support = np.atleast_2d(support)
    n, m = support.shape
    next_states = np.asarray(next_states, dtype=np.float64).reshape(n, -1)
    omegas = np.asarray(omegas, dtype=np.float64).reshape(n, -1)
    q = critic.scalar(np.repeat(next_states, m, axis=0), np.repeat(omegas, m, axis=0),
                      support.reshape(-1)).reshape(n, m)
    return soft_average(q, beta)


def bellman_target(critic, rewards, next_states, dones, support, omegas, beta=None):
    """Scalar targets ``<omega, r> + gamma * V(s')``; terminal rows use ``V = 0``."""
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
    if rewards.shape[1] != omegas.shape[1]:
        raise ValueError("reward vectors and preferences differ in length")
    y = np.sum(rewards * omegas, axis=1)
    if critic.gamma > 0:
        v = soft_value(critic, next_states, support, omegas, beta)
        y = y + critic.gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * v
    return y


def critic_loss_and_grads(critic, states, actions, omegas, targets):
    """Mean squared scalarized error and its gradient (targets held fixed)."""
    if hasattr(critic, "loss_and_grads"):
        return critic.loss_and_grads(states, actions, omegas, targets)
    X = critic.features(states, omegas, actions)
    q = critic.net.forward(X)
    omegas = np.asarray(omegas, dtype=np.float64).reshape(q.shape)
    err = np.sum(q * omegas, axis=1) - targets
    n = len(targets)
    loss = float(np.mean(err * err))
    g_out = (2.0 / n) * err[:, None] * omegas
    grads, _ = critic.net.backward(X, g_out)
    return loss, grads


def critic_update(critic, opt: Adam, batch, omegas, support, beta=None):
    """One semi-gradient regression step; returns the pre-step loss.

    ``batch`` is a mapping with ``s``, ``a``, ``r``, ``s2`` and ``done`` arrays
    (states already encoded, actions as flat joint indices).
    """
    y = bellman_target(critic, batch["r"], batch["s2"], batch["done"], support, omegas, beta)
    loss, grads = critic_loss_and_grads(critic, batch["s"], batch["a"], omegas, y)
    if not np.isfinite(loss):
        raise FloatingPointError("critic loss is not finite")
    opt.step(critic.params(), grads, names=critic.block_names())
    return loss
