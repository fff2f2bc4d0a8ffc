"""Exact reference computations: Boltzmann tilting and gradient equivalence.

The gradient check enumerates every ``(A0, A1, A_t)`` triple of a tiny
one-state instance on a Gauss-Legendre time grid, so both losses are exact
finite sums and any gap between their gradients is real rather than Monte
Carlo noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flowcore import TIME_EPS, RateField, target_columns


class QuadratureError(ValueError):
    pass


def boltzmann_exact(mu, q, beta):
    """``mu * exp(beta q)`` normalized, computed in log space."""
    mu = np.asarray(mu, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if mu.shape != q.shape:
        raise ValueError("mu and Q differ in shape")
    if np.any(mu < 0) or mu.sum() <= 0:
        raise ValueError("mu needs positive mass")
    with np.errstate(divide="ignore"):
        z = np.log(mu) + beta * q
    z -= z[mu > 0].max()
    p = np.where(mu > 0, np.exp(z), 0.0)
    return p / p.sum()


@dataclass
class TinyInstance:
    """One state, ``n_actions`` actions, exhaustively enumerable."""

    n_actions: int = 3
    p0: np.ndarray | None = None
    p1: np.ndarray | None = None
    state: np.ndarray | None = None
    omega: np.ndarray | None = None
    n_nodes: int = 16
    eps: float = TIME_EPS

    def __post_init__(self):
        n = self.n_actions
        if not 2 <= n <= 4:
            raise ValueError("exhaustive instances need 2 to 4 actions")
        self.p0 = np.full(n, 1.0 / n) if self.p0 is None else np.asarray(self.p0, float)
        self.p1 = np.full(n, 1.0 / n) if self.p1 is None else np.asarray(self.p1, float)
        self.state = np.ones(1) if self.state is None else np.asarray(self.state, float)
        self.omega = np.array([0.5, 0.5]) if self.omega is None else np.asarray(self.omega, float)

    def nodes(self):
        if self.n_nodes < 2:
            raise QuadratureError(f"{self.n_nodes} quadrature node(s) cannot resolve the "
                                  "time integral; use at least 2")
        if self.n_nodes > 32:
            raise QuadratureError(f"{self.n_nodes} nodes exceeds the 32-node limit")
        x, w = np.polynomial.legendre.leggauss(self.n_nodes)
        hi = 1.0 - self.eps
        return 0.5 * hi * (x + 1.0), 0.5 * hi * w

    def make_field(self, hidden=(8, 8), seed=3):
        return RateField(len(self.state), len(self.omega), (self.n_actions,), hidden=hidden,
                         rng=seed)


def random_weights(n_actions, seed=3, low=0.2, high=3.0):
    """Positive weights ``w(A0, A1)`` that ignore the model parameters."""
    table = np.random.default_rng(seed).uniform(low, high, size=(n_actions, n_actions))

    def weight_fn(a0, a1, field):
        return table[a0, a1]
    weight_fn.theta_dependent = False
    return weight_fn


def unit_weights(a0, a1, field):
    return 1.0


unit_weights.theta_dependent = False


def theta_dependent_weights(instance: TinyInstance, scale=2.0):
    """Weights built from the model's own output: deliberately break the hypothesis."""

    def weight_fn(a0, a1, field):
        X = field.features(instance.state[None], instance.omega[None], np.array([0.5]),
                           np.array([a1]))
        raw = field.nets[0].forward(X)[0]
        return float(np.exp(scale * np.tanh(raw[a0])))
    weight_fn.theta_dependent = True
    return weight_fn


def _enumerate(instance: TinyInstance, field, weight_fn):
    """Rows of the conditional and marginal regressions for the current weights."""
    n = instance.n_actions
    ts, qs = instance.nodes()
    w = np.array([[weight_fn(a0, a1, field) for a1 in range(n)] for a0 in range(n)])
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    cond = {"t": [], "x": [], "target": [], "weight": []}
    marg = {"t": [], "x": [], "target": [], "weight": []}
    for t, q in zip(ts, qs):
        mass = np.zeros(n)
        flux = np.zeros((n, n))
        for a0 in range(n):
            for a1 in range(n):
                pz = instance.p0[a0] * instance.p1[a1] * w[a0, a1]
                if pz == 0:
                    continue
                pt = np.zeros(n)
                pt[a0] += 1.0 - t
                pt[a1] += t
                for x in np.nonzero(pt)[0]:
                    tgt = target_columns(np.array([a1]), np.array([t]), np.array([x]), n,
                                         instance.eps)[0]
                    cond["t"].append(t)
                    cond["x"].append(x)
                    cond["target"].append(tgt)
                    cond["weight"].append(q * pz * pt[x])
                    mass[x] += pz * pt[x]
                    flux[x] += pz * pt[x] * tgt
        for x in np.nonzero(mass)[0]:
            marg["t"].append(t)
            marg["x"].append(x)
            marg["target"].append(flux[x] / mass[x])
            marg["weight"].append(q * mass[x])
    return ({k: np.array(v) for k, v in cond.items()},
            {k: np.array(v) for k, v in marg.items()})


def _loss_and_grad(field: RateField, instance, rows, grad=True):
    m = len(rows["t"])
    states = np.repeat(instance.state[None], m, axis=0)
    omegas = np.repeat(instance.omega[None], m, axis=0)
    loss, grads = field.regression(states, omegas, rows["t"], rows["x"], [rows["target"]],
                                   rows["weight"], 1.0)
    return loss, np.concatenate([g.ravel() for g in grads])


def guided_losses(field, weight_fn, instance: TinyInstance):
    """Return ``(conditional loss, marginal loss)`` as exact finite sums."""
    cond, marg = _enumerate(instance, field, weight_fn)
    return _loss_and_grad(field, instance, cond)[0], _loss_and_grad(field, instance, marg)[0]


def guided_gradients(field, weight_fn, instance: TinyInstance, fd_step=1e-6):
    """Full parameter gradients of the conditional and marginal guided losses.

    The part flowing through the rate model is back-propagated.  When the
    weights depend on the parameters their contribution is added by central
    differences with the rate model frozen.
    """
    cond, marg = _enumerate(instance, field, weight_fn)
    _, g_c = _loss_and_grad(field, instance, cond)
    _, g_m = _loss_and_grad(field, instance, marg)
    if getattr(weight_fn, "theta_dependent", True):
        base = field.flatten()
        frozen = field.copy()
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = base.copy()
                probe[i] += sign * fd_step
                field.unflatten(probe)
                c, m = _enumerate(instance, field, weight_fn)
                vals.append((_loss_and_grad(frozen, instance, c)[0],
                             _loss_and_grad(frozen, instance, m)[0]))
            g_c[i] += (vals[0][0] - vals[1][0]) / (2 * fd_step)
            g_m[i] += (vals[0][1] - vals[1][1]) / (2 * fd_step)
        field.unflatten(base)
    return g_c, g_m


def gradient_equivalence_check(field: RateField | None = None, weight_fn=None,
                               instance: TinyInstance | None = None):
    """Max relative gap ``|g_cond - g_marg|_inf / |g_cond|_inf``."""
    instance = TinyInstance() if instance is None else instance
    field = instance.make_field() if field is None else field
    weight_fn = unit_weights if weight_fn is None else weight_fn
    if field.agent_sizes != (instance.n_actions,):
        raise ValueError("field and instance disagree on the action count")
    g_c, g_m = guided_gradients(field, weight_fn, instance)
    scale = np.max(np.abs(g_c))
    if scale == 0:
        raise ValueError("conditional gradient vanishes; gap is undefined")
    return float(np.max(np.abs(g_c - g_m)) / scale)


# -- sampler check ---------------------------------------------------------

def alpha_pi_generator(pi, alpha):
    """Time-homogeneous generator jumping to ``j`` at rate ``alpha * pi_j``."""
    pi = np.asarray(pi, dtype=np.float64)
    U = alpha * np.repeat(pi[:, None], len(pi), axis=1)
    U[np.diag_indices(len(pi))] = 0.0
    U[np.diag_indices(len(pi))] = -U.sum(axis=0)
    return U


def alpha_pi_exact(pi, alpha, p0, t=1.0):
    """Closed-form law at time ``t``: ``pi + exp(-alpha t) (p0 - pi)``."""
    pi = np.asarray(pi, dtype=np.float64)
    return pi + np.exp(-alpha * t) * (np.asarray(p0, dtype=np.float64) - pi)


@dataclass
class SamplerCell:
    alpha: float
    n_steps: int
    tv_exact: float
    tv_target: float
    clamped: int


def sampler_check(pi=(0.7, 0.3), alphas=(0.5, 1.0, 2.0, 5.0, 10.0), step_counts=(20,),
                  n_samples=100_000, p0=None, seed=0, strict=False):
    """Euler terminal law of ``u = alpha * pi`` against the exact chain marginal.

    ``p0`` defaults to a point mass on the least likely action (fixed-action
    initialization).  Returns one :class:`SamplerCell` per ``(alpha, N)``.
    """
    from .flowcore import SimStats, empirical_distribution, euler_run, exact_chain_marginal

    pi = np.asarray(pi, dtype=np.float64)
    n = len(pi)
    if p0 is None:
        p0 = np.zeros(n)
        p0[np.argmin(pi)] = 1.0
    p0 = np.asarray(p0, dtype=np.float64)
    root = np.random.SeedSequence(seed)
    cells = []
    grid = [(a, N) for a in alphas for N in step_counts]
    for (alpha, N), child in zip(grid, root.spawn(len(grid))):
        rng = np.random.default_rng(child)
        U = alpha_pi_generator(pi, alpha)
        exact = exact_chain_marginal(lambda t: U, p0, substeps=1000)
        a0 = rng.choice(n, size=n_samples, p=p0)
        stats = SimStats()

        def rate_fn(t, cur):
            return U[:, cur].T

        ends = euler_run(rate_fn, a0, N, rng, stats=stats, strict=strict)
        emp = empirical_distribution(ends, n)
        cells.append(SamplerCell(float(alpha), int(N), float(0.5 * np.abs(emp - exact).sum()),
                                 float(0.5 * np.abs(emp - pi).sum()), stats.clamped))
    return cells
