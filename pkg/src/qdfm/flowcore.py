"""Continuous-time Markov chain machinery over a finite action set.

Rate columns follow the convention ``u[a', a]`` = rate of jumping from the
current action ``a`` to ``a'``; a valid column has nonnegative off-diagonal
entries and sums to zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nnet import DenseNet, load_params, save_params, sigmoid, softplus

log = logging.getLogger(__name__)

TIME_EPS = 1e-3
N_TIME_FREQ = 4
DIVERGENCES = ("l2", "kl")


class GeneratorError(ValueError):
    pass


class StepSizeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    n: int
    factors: tuple | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("action space needs at least two actions")
        if self.factors is not None and int(np.prod(self.factors)) != self.n:
            raise ValueError(f"factorization {self.factors} does not multiply to {self.n}")


@dataclass(frozen=True)
class ConditioningZ:
    state: object
    omega: tuple
    a0: int
    a1: int

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"preference {self.omega} is not on the simplex")
        if self.a0 < 0 or self.a1 < 0:
            raise ValueError("actions must be nonnegative indices")


@dataclass
class RateColumn:
    values: np.ndarray
    current: int

    def check(self, tol=1e-9):
        off = np.delete(self.values, self.current)
        return bool(np.all(off >= 0) and abs(self.values.sum()) <= tol)


def clamp_time(t, eps=TIME_EPS):
    return np.minimum(np.asarray(t, dtype=np.float64), 1.0 - eps)


# -- conditional path and target generator ---------------------------------

def conditional_path_prob(z: ConditioningZ, t, n_actions):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    p = np.zeros(n_actions)
    p[z.a0] += 1.0 - t
    p[z.a1] += t
    return p


def sample_path(a0, a1, t, rng):
    """Vectorized draw from the two-point mixture: ``a1`` with probability ``t``."""
    a0 = np.asarray(a0)
    a1 = np.asarray(a1)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), a0.shape[:1])
    u = rng.random(a0.shape)
    hit = u < (t if a0.ndim == 1 else t[:, None])
    return np.where(hit, a1, a0)


def sample_conditional_path(z: ConditioningZ, t, rng):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return int(sample_path(np.array([z.a0]), np.array([z.a1]), t, rng)[0])


def target_columns(a1, t, current, n_actions, eps=TIME_EPS):
    """Jump-to-endpoint columns for a batch; rows at the endpoint are zero."""
    a1 = np.asarray(a1)
    current = np.asarray(current)
    rate = 1.0 / (1.0 - clamp_time(t, eps))
    rate = np.broadcast_to(rate, a1.shape)
    out = np.zeros((a1.shape[0], n_actions))
    moving = current != a1
    rows = np.nonzero(moving)[0]
    out[rows, a1[rows]] = rate[rows]
    out[rows, current[rows]] = -rate[rows]
    return out


def target_rate_column(z: ConditioningZ, t, current, n_actions, eps=TIME_EPS):
    col = target_columns(np.array([z.a1]), np.array([t]), np.array([current]), n_actions, eps)
    return RateColumn(col[0], int(current))


def target_generator(a1, t, n_actions, eps=TIME_EPS):
    """Full ``|A| x |A|`` generator of the jump-to-endpoint chain at time ``t``."""
    rate = 1.0 / (1.0 - min(t, 1.0 - eps))
    U = np.zeros((n_actions, n_actions))
    U[a1] = rate
    U[np.diag_indices(n_actions)] = -rate
    U[a1, a1] = 0.0
    return U


# -- validity projection ---------------------------------------------------

def project_rates(raw, current, scale=1.0):
    """Map raw outputs ``(n, A)`` to valid columns via softplus off-diagonals."""
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[0]
    rows = np.arange(n)
    off = softplus(raw) * np.reshape(scale, (-1, 1))
    off[rows, current] = 0.0
    off[rows, current] = -off.sum(axis=1)
    return off


def project_rates_backward(raw, current, grad_col, scale=1.0):
    """Pull a gradient w.r.t. projected columns back to the raw outputs."""
    rows = np.arange(raw.shape[0])
    g_diag = grad_col[rows, current]
    g = (grad_col - g_diag[:, None]) * sigmoid(raw) * np.reshape(scale, (-1, 1))
    g[rows, current] = 0.0
    return g


def project_to_valid_rates(raw, current) -> RateColumn:
    raw = np.asarray(raw, dtype=np.float64)
    col = project_rates(raw[None, :], np.array([current]))[0]
    return RateColumn(col, int(current))


# -- learned rate field ----------------------------------------------------

def time_features(t):
    """Raw time plus a sinusoidal embedding at ``N_TIME_FREQ`` frequencies."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.pi * 2.0 ** np.arange(N_TIME_FREQ)
    return np.concatenate([t, np.sin(t * freqs), np.cos(t * freqs)], axis=1)


def one_hot(idx, n):
    idx = np.asarray(idx)
    out = np.zeros((idx.shape[0], n))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


class RateField:
    """Neural rate model ``(state, omega, t, current action) -> rate column``.

    ``agent_sizes`` holds one entry per agent; a plain single-agent policy is
    the one-agent case.  Each agent has its own :class:`DenseNet` that reads
    the concatenated one-hot encoding of the full joint action and emits raw
    rates over its own coordinate.

    With ``time_scaled`` the projected off-diagonals are divided by ``1 - t``
    so the networks only regress the bounded jump intensities.
    """

    def __init__(self, state_dim, n_objectives, agent_sizes, hidden=(64, 64),
                 activation="tanh", rng=None, time_scaled=True, eps=TIME_EPS):
        if np.isscalar(agent_sizes):
            agent_sizes = (int(agent_sizes),)
        self.agent_sizes = tuple(int(a) for a in agent_sizes)
        if min(self.agent_sizes) < 2:
            raise ValueError("every agent needs at least two actions")
        self.state_dim = int(state_dim)
        self.n_objectives = int(n_objectives)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.time_scaled = bool(time_scaled)
        self.eps = float(eps)
        rng = np.random.default_rng(rng)
        in_dim = self.state_dim + self.n_objectives + 1 + 2 * N_TIME_FREQ + sum(self.agent_sizes)
        self.nets = [DenseNet([in_dim, *self.hidden, a], activation=activation, rng=rng)
                     for a in self.agent_sizes]

    @property
    def n_agents(self):
        return len(self.agent_sizes)

    @property
    def n_actions(self):
        return int(np.prod(self.agent_sizes))

    @property
    def n_outputs(self):
        return sum(net.out_dim for net in self.nets)

    def params(self):
        return [p for net in self.nets for p in net.params()]

    def block_names(self):
        return [f"agent{i}.{n}" for i, net in enumerate(self.nets) for n in net.block_names()]

    def flatten(self):
        return np.concatenate([net.flatten() for net in self.nets])

    def unflatten(self, flat):
        pos = 0
        for net in self.nets:
            net.unflatten(flat[pos:pos + net.n_params])
            pos += net.n_params
        return self

    def copy(self):
        other = RateField.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.nets = [net.copy() for net in self.nets]
        return other

    def _joint(self, actions):
        actions = np.asarray(actions)
        if actions.ndim == 1:
            actions = actions[:, None]
        return actions

    def features(self, states, omegas, t, actions):
        actions = self._joint(actions)
        n = actions.shape[0]
        states = np.asarray(states, dtype=np.float64).reshape(n, self.state_dim)
        omegas = np.asarray(omegas, dtype=np.float64).reshape(n, self.n_objectives)
        t = np.broadcast_to(clamp_time(t, self.eps), (n,))
        parts = [states, omegas, time_features(t)]
        parts += [one_hot(actions[:, i], a) for i, a in enumerate(self.agent_sizes)]
        return np.concatenate(parts, axis=1)

    def _scale(self, t, n):
        t = np.broadcast_to(clamp_time(t, self.eps), (n,))
        return 1.0 / (1.0 - t) if self.time_scaled else np.ones(n)

    def columns(self, states, omegas, t, actions):
        """Valid rate columns for every agent, each of shape ``(n, |A_i|)``."""
        actions = self._joint(actions)
        X = self.features(states, omegas, t, actions)
        scale = self._scale(t, X.shape[0])
        return [project_rates(net.forward(X), actions[:, i], scale)
                for i, net in enumerate(self.nets)]

    def column(self, state, omega, t, action) -> RateColumn:
        """Single-agent convenience query."""
        cols = self.columns(np.asarray(state)[None], np.asarray(omega)[None],
                            np.array([t]), np.array([action]))
        return RateColumn(cols[0][0], int(action))

    def regression(self, states, omegas, t, actions, targets, weights, denom,
                   divergence="l2"):
        """Weighted rate regression ``sum_r w_r sum_i D(target_i, col_i) / denom``.

        ``divergence="l2"`` is the squared error over the full column.
        ``"kl"`` is the generalized KL (Poisson) Bregman divergence
        ``u log(u/v) - u + v`` summed over the off-diagonal entries; it
        shares the conditional-mean minimizer but penalizes spurious small
        rates linearly instead of quadratically.

        Returns ``(loss, grads)`` with ``grads`` aligned to :meth:`params`.
        """
        if divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}")
        actions = self._joint(actions)
        X = self.features(states, omegas, t, actions)
        n = X.shape[0]
        rows = np.arange(n)
        scale = self._scale(t, n)
        weights = np.asarray(weights, dtype=np.float64).reshape(n, 1)
        loss = 0.0
        grads = []
        for i, net in enumerate(self.nets):
            raw = net.forward(X)
            cur = actions[:, i]
            if divergence == "l2":
                col = project_rates(raw, cur, scale)
                diff = col - targets[i]
                loss += float(np.sum(weights * diff * diff)) / denom
                g_col = 2.0 * weights * diff / denom
                g_raw = project_rates_backward(raw, cur, g_col, scale)
            else:
                sp = np.maximum(softplus(raw), 1e-300)
                v = sp * scale[:, None]
                u = np.clip(targets[i], 0.0, None)
                u[rows, cur] = 0.0
                v[rows, cur] = 0.0
                with np.errstate(divide="ignore", invalid="ignore"):
                    ulog = np.where(u > 0, u * np.log(u / np.where(v > 0, v, 1.0)), 0.0)
                div = ulog - u + v
                loss += float(np.sum(weights * div)) / denom
                g_raw = weights * (v - u) * (sigmoid(raw) / sp) / denom
                g_raw[rows, cur] = 0.0
            g, _ = net.backward(X, g_raw)
            grads.extend(g)
        return loss, grads

    def header(self):
        return {"kind": "rate_field", "state_dim": self.state_dim,
                "n_objectives": self.n_objectives, "agent_sizes": list(self.agent_sizes),
                "hidden": list(self.hidden), "activation": self.activation,
                "time_scaled": self.time_scaled, "eps": self.eps,
                "widths": [net.widths for net in self.nets], "version": "qdfm-net-1"}

    def save(self, path, binary=True, **extra):
        head = self.header()
        head.update(extra)
        save_params(path, head, self.flatten(), binary=binary)

    @classmethod
    def load(cls, path):
        head, flat = load_params(path)
        if head.get("kind") != "rate_field":
            raise ValueError(f"{path} is not a rate-field checkpoint")
        field = cls(head["state_dim"], head["n_objectives"], head["agent_sizes"],
                    hidden=head["hidden"], activation=head["activation"], rng=0,
                    time_scaled=head["time_scaled"], eps=head["eps"])
        field.unflatten(flat)
        return field, head


# -- simulation ------------------------------------------------------------

@dataclass
class SimStats:
    steps: int = 0
    clamped: int = 0


def inverse_cdf(probs, u):
    """Row-wise inverse-CDF draw over index order using one uniform per row."""
    cum = np.cumsum(probs, axis=1)
    thresh = u * cum[:, -1]
    idx = np.sum(cum <= thresh[:, None], axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def euler_transition(cols, current, h, stats=None, strict=False):
    """One-step transition probabilities ``e_a + h * u`` for per-agent columns.

    ``cols`` is a list of ``(n, |A_i|)`` columns and ``current`` an ``(n, G)``
    array.  The result is ``(n, sum |A_i|)``: entry ``(i, b)`` is the chance
    that agent ``i`` moves to ``b``; the stay mass sits in agent 0's current
    slot.  Total leaving rates above ``1/h`` are clamped (or raise if strict).
    """
    n = current.shape[0]
    rows = np.arange(n)
    offs = []
    lam = np.zeros(n)
    for i, col in enumerate(cols):
        off = np.clip(col, 0.0, None)
        off[rows, current[:, i]] = 0.0
        lam += off.sum(axis=1)
        offs.append(off)
    over = h * lam > 1.0
    if np.any(over):
        if strict:
            raise StepSizeError(f"h*lambda={float(np.max(h * lam)):.4g} exceeds 1")
        if stats is not None:
            stats.clamped += int(over.sum())
    factor = np.where(over, 1.0 / np.maximum(h * lam, 1e-300), 1.0) * h
    probs = np.concatenate([off * factor[:, None] for off in offs], axis=1)
    stay = 1.0 - np.minimum(h * lam, 1.0)
    probs[rows, current[:, 0]] += stay
    return probs


def euler_run(rate_fn, a0, n_steps, rng, stats=None, strict=False, agent_sizes=None):
    """Simulate chains from ``a0`` with ``rate_fn(t, current) -> [cols]``.

    ``a0`` has shape ``(n,)`` for a single agent or ``(n, G)``.  Exactly one
    uniform is drawn per chain per step.
    """
    single = np.asarray(a0).ndim == 1
    cur = np.array(a0, dtype=np.int64, copy=True)
    if single:
        cur = cur[:, None]
    n = cur.shape[0]
    h = 1.0 / n_steps
    stats = stats if stats is not None else SimStats()
    for k in range(n_steps):
        t = k * h
        cols = rate_fn(t, cur[:, 0] if single else cur)
        if isinstance(cols, np.ndarray):
            cols = [cols]
        sizes = agent_sizes or [c.shape[1] for c in cols]
        probs = euler_transition(cols, cur, h, stats, strict)
        u = rng.random(n)
        flat = inverse_cdf(probs, u)
        offsets = np.cumsum([0, *sizes])
        agent = np.searchsorted(offsets, flat, side="right") - 1
        target = flat - offsets[agent]
        cur[np.arange(n), agent] = target
        stats.steps += 1
    if stats.clamped:
        log.debug("euler_run clamped %d transitions", stats.clamped)
    return cur[:, 0] if single else cur


def euler_simulate(field: RateField, states, omegas, a0, n_steps, rng, stats=None,
                   strict=False):
    """Terminal actions of the learned chain for a batch of ``(s, omega, a0)``."""
    a0 = np.asarray(a0)
    n = a0.shape[0]
    states = np.asarray(states, dtype=np.float64).reshape(n, -1)
    omegas = np.asarray(omegas, dtype=np.float64).reshape(n, -1)

    def rate_fn(t, cur):
        return field.columns(states, omegas, np.full(n, t), cur)

    return euler_run(rate_fn, a0, n_steps, rng, stats=stats, strict=strict,
                     agent_sizes=list(field.agent_sizes))


# -- exact oracle ----------------------------------------------------------

def check_generator(U, tol=1e-9):
    U = np.asarray(U, dtype=np.float64)
    off = U - np.diag(np.diag(U))
    scale = np.maximum(1.0, np.abs(U).max(axis=0))
    bad = (off.min(axis=0) < -tol) | (np.abs(U.sum(axis=0)) > tol * scale)
    if bad.any():
        a = int(np.argmax(bad))
        raise GeneratorError(f"column {a} is not a valid generator column: {U[:, a]}")


def exact_chain_marginal(rate_fn, p0, substeps=4000, t_end=1.0, validate=True):
    """Integrate ``dp/dt = U(t) p`` from 0 to ``t_end`` with fixed-step RK4."""
    if substeps < 1000:
        raise ValueError("use at least 1000 substeps")
    p = np.asarray(p0, dtype=np.float64).copy()
    dt = t_end / substeps

    def f(t, q):
        U = np.asarray(rate_fn(t), dtype=np.float64)
        if validate:
            check_generator(U)
        return U @ q

    for k in range(substeps):
        t = k * dt
        k1 = f(t, p)
        k2 = f(t + dt / 2, p + dt / 2 * k1)
        k3 = f(t + dt / 2, p + dt / 2 * k2)
        k4 = f(t + dt, p + dt * k3)
        p = p + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.clip(p, 0.0, None)


def empirical_distribution(samples, n):
    return np.bincount(np.asarray(samples), minlength=n) / len(samples)
