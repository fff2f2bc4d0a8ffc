"""Three-phase Q-weighted discrete flow matching.

Phase 1 regresses the rate field onto jump-to-endpoint targets from a
uniform source to the behavior model.  Phase 2 fits a vector critic with a
scalarized soft backup over in-support actions.  Phase 3 re-weights
simulated endpoints by ``exp(beta * Q_omega)`` and regresses again, this time
starting each conditional path at the dataset action.
"""
from __future__ import annotations

import csv
import io
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .critic import TabularCritic, VectorCritic, bellman_target, critic_loss_and_grads
from .dataio import BehaviorModel, atomic_write_text, OfflineDataset, fit_behavior
from .flowcore import DIVERGENCES, TIME_EPS, RateField, euler_simulate, sample_path, target_columns
from .nnet import Adam

log = logging.getLogger(__name__)

ENDPOINT_SOURCES = ("warmup", "current", "behavior")


class ConfigurationError(ValueError):
    pass


def substream(seed, name):
    """Independent generator derived from a root seed and a stream name."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def sample_preferences(rng, n, K):
    if K == 1:
        return np.ones((n, 1))
    return rng.dirichlet(np.ones(K), size=n)


@dataclass
class TrainConfig:
    k1: int = 3000
    k2: int = 5000
    k3: int = 4000
    batch_size: int = 64
    support_size: int = 16
    beta: float = 20.0
    k_renew: int = 50
    n_steps: int = 20
    h: float | None = None
    lr_field: float = 1e-3
    lr_critic: float = 1e-3
    gamma: float = 0.99
    hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    endpoint_source: str = "behavior"
    critic_preference_input: bool = True
    critic_kind: str = "joint"
    time_scaled: bool = True
    smoothing: float = 0.1
    time_power: float = 1.0
    divergence: str = "l2"
    eps: float = TIME_EPS
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if self.h is None:
            self.h = 1.0 / self.n_steps

    def check(self):
        for name in ("batch_size", "support_size", "k_renew", "n_steps"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("k1", "k2", "k3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if abs(self.n_steps * self.h - 1.0) > 1e-12:
            raise ConfigurationError(f"n_steps * h = {self.n_steps * self.h} != 1")
        if self.beta < 0:
            raise ConfigurationError("beta must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if self.divergence not in DIVERGENCES:
            raise ConfigurationError(f"divergence must be one of {DIVERGENCES}")
        if self.critic_kind not in ("joint", "mixer"):
            raise ConfigurationError("critic_kind must be 'joint' or 'mixer'")
        if self.endpoint_source not in ENDPOINT_SOURCES:
            raise ConfigurationError(f"endpoint_source must be one of {ENDPOINT_SOURCES}")
        return self

    def as_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


# -- inference -------------------------------------------------------------

class QDFMPolicy:
    """Samples actions by simulating the learned chain from ``t=0`` to ``t=1``.

    ``source`` picks the initial action distribution: ``"behavior"`` draws
    from the behavior model, ``"uniform"`` from the uniform base used during
    the warm-up phase.
    """

    def __init__(self, field: RateField, behavior: BehaviorModel, encode, n_steps=20,
                 source="behavior", strict=False):
        self.field = field
        self.behavior = behavior
        self.encode = encode
        self.n_steps = n_steps
        self.source = source
        self.strict = strict

    @property
    def agent_sizes(self):
        return self.field.agent_sizes

    def initial(self, state_ids, rng):
        state_ids = np.asarray(state_ids)
        if self.source == "behavior":
            flat = self.behavior.sample(state_ids, rng)
            return np.stack(np.unravel_index(flat, self.agent_sizes), axis=-1)
        return np.stack([rng.integers(a, size=len(state_ids)) for a in self.agent_sizes],
                        axis=-1)

    def act(self, state_ids, omegas, rng, stats=None):
        """Flat joint actions for a batch of state ids and preferences."""
        state_ids = np.atleast_1d(np.asarray(state_ids))
        omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
        if omegas.shape[0] == 1 and len(state_ids) > 1:
            omegas = np.repeat(omegas, len(state_ids), axis=0)
        a0 = self.initial(state_ids, rng)
        out = euler_simulate(self.field, self.encode(state_ids), omegas, a0, self.n_steps,
                             rng, stats=stats, strict=self.strict)
        return np.ravel_multi_index(tuple(out.T), self.agent_sizes)

    def terminal_distribution(self, state_id, omega, n, rng):
        acts = self.act(np.full(n, state_id), omega, rng)
        return np.bincount(acts, minlength=self.field.n_actions) / n


# -- phase steps -----------------------------------------------------------

def _split(flat, sizes):
    return np.stack(np.unravel_index(np.asarray(flat), sizes), axis=-1)


def _targets(field, a1, at, t):
    return [target_columns(a1[:, i], t, at[:, i], size, field.eps)
            for i, size in enumerate(field.agent_sizes)]


def time_weights(t, power):
    """Per-row factor ``(1 - t)^power``.

    The factor depends on ``t`` only, so the pointwise minimizer of the
    regression is unchanged; it keeps rows near ``t = 1`` (targets of order
    ``1/(1-t)``) from swamping the gradient.
    """
    return (1.0 - np.asarray(t)) ** power if power else np.ones(np.shape(t))


def warmup_batch(field: RateField, states, behavior_actions, rng, time_power=1.0):
    """Draw the Phase 1 regression batch.

    ``behavior_actions`` are flat joint endpoints drawn from the behavior
    model.  Returns the arguments of :meth:`RateField.regression`.
    """
    n = len(behavior_actions)
    omegas = sample_preferences(rng, n, field.n_objectives)
    a0 = np.stack([rng.integers(a, size=n) for a in field.agent_sizes], axis=-1)
    a1 = _split(behavior_actions, field.agent_sizes)
    t = rng.uniform(0.0, 1.0 - field.eps, size=n)
    at = sample_path(a0, a1, t, rng)
    return states, omegas, t, at, _targets(field, a1, at, t), time_weights(t, time_power), n


def dfm_warmup_step(field: RateField, opt: Adam, states, state_ids, behavior: BehaviorModel,
                    rng, time_power=1.0, divergence="l2"):
    """One unweighted conditional flow-matching step; returns the pre-step loss."""
    if len(state_ids) == 0:
        raise ValueError("empty batch")
    a1 = behavior.sample(state_ids, rng)
    args = warmup_batch(field, states, a1, rng, time_power)
    loss, grads = field.regression(*args, divergence=divergence)
    opt.step(field.params(), grads, names=field.block_names())
    return loss


def guidance_weights(critic, states, omegas, endpoints, beta):
    """Self-normalized ``exp(beta * Q_omega)`` over each row of ``endpoints``."""
    endpoints = np.atleast_2d(endpoints)
    n, m = endpoints.shape
    states = np.asarray(states, dtype=float).reshape(n, -1)
    omegas = np.asarray(omegas, dtype=float).reshape(n, -1)
    q = critic.scalar(np.repeat(states, m, axis=0), np.repeat(omegas, m, axis=0),
                      endpoints.reshape(-1)).reshape(n, m)
    z = beta * q
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def qweighted_batch(field: RateField, states, omegas, a0_flat, endpoints, weights, rng,
                    time_power=1.0):
    """Expand a batch of ``B`` rows and ``M`` weighted endpoints into ``B*M`` rows."""
    b, m = endpoints.shape
    states = np.repeat(np.asarray(states, dtype=float).reshape(b, -1), m, axis=0)
    om = np.repeat(np.asarray(omegas, dtype=float).reshape(b, -1), m, axis=0)
    a0 = _split(np.repeat(a0_flat, m), field.agent_sizes)
    a1 = _split(endpoints.reshape(-1), field.agent_sizes)
    t = rng.uniform(0.0, 1.0 - field.eps, size=b * m)
    at = sample_path(a0, a1, t, rng)
    w = weights.reshape(-1) * time_weights(t, time_power)
    return states, om, t, at, _targets(field, a1, at, t), w, b


def qweighted_step(field: RateField, opt: Adam, critic, states, omegas, actions, endpoints,
                   beta, rng, time_power=1.0, divergence="l2"):
    """One Q-weighted conditional flow-matching step; returns the pre-step loss."""
    if critic is None:
        raise ConfigurationError("Q-weighted step needs a trained critic")
    w = guidance_weights(critic, states, omegas, endpoints, beta)
    args = qweighted_batch(field, states, omegas, actions, endpoints, w, rng, time_power)
    loss, grads = field.regression(*args, divergence=divergence)
    opt.step(field.params(), grads, names=field.block_names())
    return loss


class EndpointCache:
    """Per-transition preference and endpoint set, renewed once per window.

    An entry drawn in window ``k // k_renew`` is reused until the window
    changes; the preference stored with it is resampled at renewal.
    """

    def __init__(self, n, m, K, sampler):
        self.omega = np.zeros((n, K))
        self.endpoints = np.zeros((n, m), dtype=np.int64)
        self.stamp = np.full(n, -1, dtype=np.int64)
        self.sampler = sampler
        self.m = m
        self.K = K
        self.renewals = 0

    def get(self, idx, window, state_ids, rng):
        stale = np.unique(idx[self.stamp[idx] != window])
        if len(stale):
            pos = {int(i): k for k, i in enumerate(idx)}
            sid = np.array([state_ids[pos[int(i)]] for i in stale])
            om = sample_preferences(rng, len(stale), self.K)
            ends = self.sampler(np.repeat(sid, self.m), np.repeat(om, self.m, axis=0), rng)
            self.omega[stale] = om
            self.endpoints[stale] = ends.reshape(len(stale), self.m)
            self.stamp[stale] = window
            self.renewals += len(stale)
        return self.omega[idx], self.endpoints[idx]


# -- full pipeline ---------------------------------------------------------

@dataclass
class TrainResult:
    field: RateField
    critic: object
    behavior: BehaviorModel
    policy: QDFMPolicy
    log: list = field(default_factory=list)
    warmup_field: RateField | None = None

    def losses(self, phase=None):
        return [r["loss"] for r in self.log if phase is None or r["phase"] == phase]


def write_log(rows, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "step", "loss", "wall_ms"])
    for r in rows:
        w.writerow([r["phase"], r["step"], repr(r["loss"]), f"{r['wall_ms']:.3f}"])
    atomic_write_text(path, buf.getvalue())


def read_log(path):
    with open(path, newline="") as fh:
        return [{"phase": int(r["phase"]), "step": int(r["step"]), "loss": float(r["loss"]),
                 "wall_ms": float(r["wall_ms"])} for r in csv.DictReader(fh)]


def make_field(config: TrainConfig, env):
    return RateField(env.state_dim, env.K, env.agent_sizes, hidden=config.hidden,
                     rng=substream(config.seed, "init.field"),
                     time_scaled=config.time_scaled, eps=config.eps)


def make_critic(config: TrainConfig, env):
    if config.critic_kind == "mixer":
        from .marl import MonotonicMixerCritic
        return MonotonicMixerCritic(env.state_dim, env.agent_sizes, env.K, gamma=config.gamma,
                                    beta=max(config.beta, 1e-12), hidden=config.critic_hidden,
                                    rng=substream(config.seed, "init.critic"))
    return VectorCritic(env.state_dim, env.n_actions, env.K, gamma=config.gamma,
                        beta=max(config.beta, 1e-12), hidden=config.critic_hidden,
                        condition_on_preference=config.critic_preference_input,
                        rng=substream(config.seed, "init.critic"))


def train(config: TrainConfig, dataset: OfflineDataset, env, critic=None, out_dir=None,
          resume=False, progress=None):
    """Run all three phases and return a :class:`TrainResult`.

    A supplied ``critic`` (e.g. an exact :class:`TabularCritic`) replaces
    Phase 2.  With ``out_dir`` a checkpoint is written at every phase
    boundary; ``resume`` reloads finished phases instead of recomputing them.
    """
    config.check()
    if dataset.K != env.K or tuple(dataset.agent_sizes) != tuple(env.agent_sizes):
        raise ConfigurationError("dataset schema does not match the environment")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    behavior = fit_behavior(dataset, env.n_states, config.smoothing)
    field = make_field(config, env)
    rows = []
    n_data = len(dataset)
    B = config.batch_size

    def record(phase, step, loss, t0):
        rows.append({"phase": phase, "step": step, "loss": float(loss),
                     "wall_ms": (time.perf_counter() - t0) * 1e3})
        if progress is not None:
            progress(phase, step, loss)

    def ckpt(name):
        return out / name if out is not None else None

    # Phase 1
    p1 = ckpt("field_phase1.bin")
    if resume and p1 is not None and p1.exists():
        field, _ = RateField.load(p1)
        rows.extend(_phase_rows(out, 1))
    else:
        rng = substream(config.seed, "phase1")
        opt = Adam(lr=config.lr_field)
        for k in range(config.k1):
            t0 = time.perf_counter()
            idx = rng.integers(n_data, size=B)
            sid = dataset.s[idx]
            loss = dfm_warmup_step(field, opt, env.encode(sid), sid, behavior, rng,
                                   config.time_power, config.divergence)
            record(1, k, loss, t0)
        if out is not None:
            field.save(p1)
            write_log([r for r in rows if r["phase"] == 1], out / "log_phase1.csv")
    warmup_field = field.copy()

    # Phase 2
    if critic is None:
        p2 = ckpt("critic_phase2.bin")
        if resume and p2 is not None and p2.exists():
            critic = load_critic(p2)
            rows.extend(_phase_rows(out, 2))
        else:
            critic = make_critic(config, env)
            rng = substream(config.seed, "phase2")
            opt = Adam(lr=config.lr_critic)
            support = np.zeros((n_data, config.support_size), dtype=np.int64)
            for k in range(config.k2):
                t0 = time.perf_counter()
                if k % config.k_renew == 0:
                    support = behavior.sample(np.repeat(dataset.s2, config.support_size),
                                              rng).reshape(n_data, config.support_size)
                idx = rng.integers(n_data, size=B)
                batch = dataset.batch(idx, env)
                omegas = sample_preferences(rng, B, env.K)
                y = bellman_target(critic, batch["r"], batch["s2"], batch["done"],
                                   support[idx], omegas, config.beta)
                loss, grads = critic_loss_and_grads(critic, batch["s"], batch["a"], omegas, y)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"critic loss diverged at step {k}")
                opt.step(critic.params(), grads, names=critic.block_names())
                record(2, k, loss, t0)
            if out is not None:
                critic.save(p2)
                write_log([r for r in rows if r["phase"] == 2], out / "log_phase2.csv")

    # Phase 3
    p3 = ckpt("field_phase3.bin")
    if resume and p3 is not None and p3.exists():
        field, _ = RateField.load(p3)
        rows.extend(_phase_rows(out, 3))
    elif config.k3 > 0:
        rng = substream(config.seed, "phase3")
        sim_rng = substream(config.seed, "phase3.endpoints")
        opt = Adam(lr=config.lr_field)
        sampler = _endpoint_sampler(config, field, warmup_field, behavior, env)
        cache = EndpointCache(n_data, config.support_size, env.K, sampler)
        for k in range(config.k3):
            t0 = time.perf_counter()
            idx = rng.integers(n_data, size=B)
            sid = dataset.s[idx]
            omegas, ends = cache.get(idx, k // config.k_renew, sid, sim_rng)
            loss = qweighted_step(field, opt, critic, env.encode(sid), omegas, dataset.a[idx],
                                  ends, config.beta, rng, config.time_power,
                                  config.divergence)
            record(3, k, loss, t0)
        if out is not None:
            field.save(p3)
            write_log([r for r in rows if r["phase"] == 3], out / "log_phase3.csv")

    source = "behavior" if config.k3 > 0 else "uniform"
    policy = QDFMPolicy(field, behavior, env.encode, config.n_steps, source=source)
    if out is not None:
        write_log(rows, out / "train_log.csv")
    return TrainResult(field, critic, behavior, policy, rows, warmup_field)


def load_critic(path):
    from .marl import MonotonicMixerCritic
    from .nnet import load_params
    head, _ = load_params(path)
    if head.get("kind") == "mixer_critic":
        return MonotonicMixerCritic.load(path)
    return VectorCritic.load(path)


def _phase_rows(out, phase):
    path = out / f"log_phase{phase}.csv"
    return read_log(path) if path.exists() else []


def _endpoint_sampler(config, field, warmup_field, behavior, env):
    """Return ``sampler(state_ids, omegas, rng) -> flat endpoints``."""
    sizes = field.agent_sizes

    def from_behavior(sid, om, rng):
        return behavior.sample(sid, rng)

    def simulate(model, uniform_start):
        def sampler(sid, om, rng):
            if uniform_start:
                a0 = np.stack([rng.integers(a, size=len(sid)) for a in sizes], axis=-1)
            else:
                a0 = _split(behavior.sample(sid, rng), sizes)
            ends = euler_simulate(model, env.encode(sid), om, a0, config.n_steps, rng)
            ends = ends.reshape(len(sid), -1)
            return np.ravel_multi_index(tuple(ends.T), sizes)
        return sampler

    if config.endpoint_source == "behavior":
        return from_behavior
    if config.endpoint_source == "warmup":
        return simulate(warmup_field, uniform_start=True)
    return simulate(field, uniform_start=False)
