"""Factorized multi-agent flows.

Every agent owns a rate head over its own action coordinate, and the joint
chain only ever changes one coordinate per jump.  The learned outputs thus
grow with ``sum |A_i|`` instead of ``prod |A_i|``.  The heavy lifting lives
in :mod:`qdfm.flowcore`, whose rate field and Euler sampler are written for
``G >= 1`` agents; this module adds the joint-action vocabulary, the
factored targets and the centralized critics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flowcore import (TIME_EPS, RateColumn, RateField, euler_simulate, sample_path,
                       target_columns)
from .nnet import DenseNet, load_params, save_params, sigmoid, softplus
from .training import qweighted_step


@dataclass(frozen=True)
class JointAction:
    actions: tuple
    sizes: tuple

    def __post_init__(self):
        if len(self.actions) != len(self.sizes):
            raise ValueError("one action per agent is required")
        for a, n in zip(self.actions, self.sizes):
            if not 0 <= a < n:
                raise ValueError(f"action {a} outside range({n})")

    @property
    def flat(self):
        return int(np.ravel_multi_index(self.actions, self.sizes))

    @classmethod
    def from_flat(cls, index, sizes):
        return cls(tuple(int(x) for x in np.unravel_index(int(index), sizes)), tuple(sizes))


class FactoredRateField(RateField):
    """Rate field with one head per agent; see :class:`qdfm.flowcore.RateField`."""

    def __init__(self, state_dim, n_objectives, agent_sizes, **kw):
        super().__init__(state_dim, n_objectives, agent_sizes, **kw)
        assert self.n_outputs == sum(self.agent_sizes)


def factored_target_rates(a0, a1, t, current, eps=TIME_EPS):
    """Per-agent jump-to-endpoint columns for one joint query.

    ``a0`` only fixes the conditioning pair; the target depends on the
    endpoint and the current joint action alone.
    """
    a1 = JointAction(tuple(a1.actions), tuple(a1.sizes)) if isinstance(a1, JointAction) else a1
    sizes = a1.sizes
    cur = current.actions if isinstance(current, JointAction) else tuple(current)
    cols = []
    for i, n in enumerate(sizes):
        col = target_columns(np.array([a1.actions[i]]), np.array([t]), np.array([cur[i]]), n,
                             eps)[0]
        cols.append(RateColumn(col, int(cur[i])))
    return cols


def factored_path_sample(a0: JointAction, a1: JointAction, t, rng):
    """Each coordinate independently keeps ``a0`` w.p. ``1 - t``, else takes ``a1``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    out = sample_path(np.array([a0.actions]), np.array([a1.actions]), t, rng)[0]
    return JointAction(tuple(int(x) for x in out), a0.sizes)


def factored_simulate(field: RateField, states, omegas, a0, n_steps, rng, stats=None,
                      strict=False):
    """Terminal joint actions ``(n, G)``; at most one coordinate moves per step."""
    a0 = np.asarray(a0)
    if a0.ndim == 1:
        a0 = a0[None]
    return euler_simulate(field, states, omegas, a0, n_steps, rng, stats=stats, strict=strict)


def marl_qweighted_step(field: RateField, opt, critic, states, omegas, actions, endpoints, beta,
                        rng, time_power=1.0, divergence="l2"):
    """Weighted sum of per-agent regressions toward joint endpoints.

    ``actions`` and ``endpoints`` are flat joint indices; the centralized
    critic scores whole joint endpoints.  With one agent this is exactly
    :func:`qdfm.training.qweighted_step`.
    """
    return qweighted_step(field, opt, critic, states, omegas, actions, endpoints, beta, rng,
                          time_power, divergence)


def coordination_rate(joint_actions):
    """Fraction of ``(n, G)`` joint actions in which every agent picks the same action."""
    A = np.asarray(joint_actions)
    return float(np.mean(np.all(A == A[:, :1], axis=1)))


class MonotonicMixerCritic:
    """Per-agent value heads mixed with nonnegative state-dependent weights.

    ``Q(s, w, a) = sum_i softplus(h_i(s, w)) * q_i(s, w, a_i) + b(s, w)``, one
    vector per objective, so the joint value is monotone in every agent's
    own value.
    """

    def __init__(self, state_dim, agent_sizes, n_objectives, gamma=0.99, beta=20.0,
                 hidden=(64, 64), activation="tanh", rng=None):
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {gamma}")
        rng = np.random.default_rng(rng)
        self.state_dim = int(state_dim)
        self.agent_sizes = tuple(int(a) for a in agent_sizes)
        self.n_actions = int(np.prod(self.agent_sizes))
        self.n_objectives = int(n_objectives)
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.hidden = tuple(hidden)
        self.activation = activation
        ctx = self.state_dim + self.n_objectives
        self.heads = [DenseNet([ctx + a, *self.hidden, self.n_objectives], activation, rng)
                      for a in self.agent_sizes]
        self.hyper = DenseNet([ctx, *self.hidden, len(self.agent_sizes) + self.n_objectives],
                              activation, rng)

    @property
    def nets(self):
        return [*self.heads, self.hyper]

    def params(self):
        return [p for net in self.nets for p in net.params()]

    def block_names(self):
        names = [f"head{i}" for i in range(len(self.heads))] + ["hyper"]
        return [f"{tag}.{n}" for tag, net in zip(names, self.nets) for n in net.block_names()]

    def copy(self):
        other = MonotonicMixerCritic.__new__(MonotonicMixerCritic)
        other.__dict__.update(self.__dict__)
        other.heads = [h.copy() for h in self.heads]
        other.hyper = self.hyper.copy()
        return other

    def _inputs(self, states, omegas, actions):
        actions = np.asarray(actions)
        n = actions.shape[0]
        ctx = np.concatenate([np.asarray(states, float).reshape(n, self.state_dim),
                              np.asarray(omegas, float).reshape(n, self.n_objectives)], axis=1)
        joint = np.stack(np.unravel_index(actions, self.agent_sizes), axis=-1)
        heads = []
        for i, a in enumerate(self.agent_sizes):
            oh = np.zeros((n, a))
            oh[np.arange(n), joint[:, i]] = 1.0
            heads.append(np.concatenate([ctx, oh], axis=1))
        return ctx, heads

    def _forward(self, ctx, heads):
        G = len(self.heads)
        qs = [net.forward(x) for net, x in zip(self.heads, heads)]
        hv = self.hyper.forward(ctx)
        mix = softplus(hv[:, :G])
        out = hv[:, G:].copy()
        for i, q in enumerate(qs):
            out += mix[:, i:i + 1] * q
        return out, qs, hv

    def values(self, states, omegas, actions):
        ctx, heads = self._inputs(states, omegas, actions)
        return self._forward(ctx, heads)[0]

    def scalar(self, states, omegas, actions):
        omegas = np.asarray(omegas, float).reshape(len(actions), self.n_objectives)
        return np.sum(self.values(states, omegas, actions) * omegas, axis=1)

    def loss_and_grads(self, states, actions, omegas, targets):
        ctx, heads = self._inputs(states, omegas, actions)
        out, qs, hv = self._forward(ctx, heads)
        omegas = np.asarray(omegas, float).reshape(out.shape)
        err = np.sum(out * omegas, axis=1) - targets
        n = len(targets)
        g_out = (2.0 / n) * err[:, None] * omegas
        G = len(self.heads)
        grads = []
        g_hv = np.zeros_like(hv)
        g_hv[:, G:] = g_out
        for i, (net, x, q) in enumerate(zip(self.heads, heads, qs)):
            g_hv[:, i] = sigmoid(hv[:, i]) * np.sum(g_out * q, axis=1)
            g, _ = net.backward(x, softplus(hv[:, i:i + 1]) * g_out)
            grads.extend(g)
        g, _ = self.hyper.backward(ctx, g_hv)
        grads.extend(g)
        return float(np.mean(err * err)), grads

    def header(self):
        return {"kind": "mixer_critic", "state_dim": self.state_dim,
                "agent_sizes": list(self.agent_sizes), "K": self.n_objectives,
                "gamma": self.gamma, "beta": self.beta, "hidden": list(self.hidden),
                "activation": self.activation, "version": "qdfm-net-1"}

    def save(self, path, binary=True):
        flat = np.concatenate([net.flatten() for net in self.nets])
        save_params(path, self.header(), flat, binary=binary)

    @classmethod
    def load(cls, path):
        head, flat = load_params(path)
        if head.get("kind") != "mixer_critic":
            raise ValueError(f"{path} is not a mixer-critic checkpoint")
        critic = cls(head["state_dim"], head["agent_sizes"], head["K"], gamma=head["gamma"],
                     beta=head["beta"], hidden=head["hidden"], activation=head["activation"],
                     rng=0)
        pos = 0
        for net in critic.nets:
            net.unflatten(flat[pos:pos + net.n_params])
            pos += net.n_params
        return critic
