"""Multi-objective evaluation: fronts, hypervolume, spacing and sweeps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import atomic_write_text
from .envs import EpisodeTrace

ROUND = 1e-6


class UnsupportedDimensionError(ValueError):
    pass


def _as_points(points):
    try:
        P = np.asarray(points, dtype=np.float64)
    except ValueError as exc:
        raise ValueError("points differ in dimension") from exc
    if P.ndim == 1:
        P = P[None]
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("need a nonempty (n, K) array of points")
    return P


def dominates(a, b):
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_filter(points):
    """Non-dominated rows of ``points`` with duplicates collapsed, sorted lexicographically."""
    P = np.unique(_as_points(points), axis=0)
    keep = np.ones(len(P), dtype=bool)
    for i in range(len(P)):
        ge = np.all(P >= P[i], axis=1) & np.any(P > P[i], axis=1)
        keep[i] = not ge.any()
    return P[keep]


@dataclass
class ParetoFront:
    points: np.ndarray
    reference: np.ndarray | None = None

    def __post_init__(self):
        self.points = pareto_filter(self.points)
        if self.reference is not None:
            self.reference = np.asarray(self.reference, dtype=np.float64)

    def __len__(self):
        return len(self.points)

    def hypervolume(self):
        return hypervolume(self.points, self.reference)


def _hv2(P, ref):
    P = P[np.argsort(-P[:, 0])]
    total, best_y = 0.0, ref[1]
    for x, y in P:
        if y > best_y:
            total += (x - ref[0]) * (y - best_y)
            best_y = y
    return total


def _hv3(P, ref):
    # Sweep along z: between consecutive z levels the dominated slice is the
    # 2-D volume of every point at or above that level.
    P = P[np.argsort(-P[:, 2])]
    zs = np.append(P[:, 2], ref[2])
    total = 0.0
    for k in range(len(P)):
        depth = zs[k] - zs[k + 1]
        if depth > 0:
            total += depth * _hv2(P[:k + 1, :2], ref[:2])
    return total


def hypervolume(front, reference):
    """Exact dominated volume for ``K`` in {2, 3}; points are clipped to the reference."""
    P = _as_points(front)
    ref = np.asarray(reference, dtype=np.float64)
    K = P.shape[1]
    if ref.shape != (K,):
        raise ValueError("reference point dimension differs from the front")
    if K not in (2, 3):
        raise UnsupportedDimensionError(f"hypervolume supports K=2 or 3, got {K}")
    P = np.maximum(P, ref)
    P = pareto_filter(P)
    return _hv2(P, ref) if K == 2 else _hv3(P, ref)


def spacing(front):
    """Std of nearest-neighbour L1 distances; ``nan`` for fewer than two points."""
    P = _as_points(front)
    if len(P) < 2:
        return float("nan")
    D = np.abs(P[:, None, :] - P[None, :, :]).sum(axis=2)
    np.fill_diagonal(D, np.inf)
    return float(np.std(D.min(axis=1)))


def count_nondominated(points, tol=ROUND):
    P = np.round(_as_points(points) / tol) * tol
    return len(pareto_filter(P))


def tv_distance(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    return float(0.5 * np.abs(p - q).sum())


# -- rollouts and sweeps ---------------------------------------------------

def batched_rollouts(env, policy, omega, episodes, rng):
    """Run ``episodes`` episodes in lockstep, querying the policy once per step."""
    traces = [EpisodeTrace() for _ in range(episodes)]
    states = np.array([env.reset(rng) for _ in range(episodes)], dtype=np.int64)
    live = np.arange(episodes)
    omega = np.asarray(omega, dtype=np.float64)
    for _ in range(env.max_steps):
        if len(live) == 0:
            break
        acts = policy.act(states[live], omega[None], rng)
        still = []
        for i, a in zip(live, acts):
            s2, r, done = env.step(int(states[i]), int(a), rng)
            tr = traces[i]
            tr.states.append(int(states[i]))
            tr.actions.append(int(a))
            tr.rewards.append(r)
            tr.next_states.append(int(s2))
            tr.dones.append(bool(done))
            states[i] = s2
            if not done:
                still.append(i)
        live = np.array(still, dtype=np.int64)
    return traces


def dataset_front(dataset):
    return pareto_filter(dataset.episode_returns())


def simplex_grid(K, n):
    """``n`` evenly spaced preferences for K=2; a lattice with ``n`` divisions otherwise."""
    if K == 2:
        w = np.linspace(0.0, 1.0, n)
        return np.stack([w, 1.0 - w], axis=1)[::-1]
    if K == 1:
        return np.ones((1, 1))
    pts = []
    for i in range(n):
        for j in range(n - i):
            k = n - 1 - i - j
            pts.append((i, j, k))
    return np.array(pts, dtype=float) / (n - 1)


@dataclass
class SweepResult:
    omegas: np.ndarray
    returns: np.ndarray
    episodes: int
    reference: np.ndarray
    reference_front: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(np.unique(np.round(self.omegas, 12), axis=0)) != len(self.omegas):
            raise ValueError("preference grid has repeated entries")

    @property
    def front(self):
        return pareto_filter(self.returns)

    @property
    def hv(self):
        return hypervolume(self.returns, self.reference)

    @property
    def hv_ratio(self):
        if self.reference_front is None:
            return float("nan")
        return self.hv / hypervolume(self.reference_front, self.reference)

    @property
    def sp(self):
        return spacing(self.front)

    @property
    def nd(self):
        return count_nondominated(self.returns)

    def metrics(self):
        return {"hv": self.hv, "hv_ratio": self.hv_ratio, "sp": self.sp, "nd": self.nd,
                **self.extra}

    def to_json(self, path=None):
        m = {k: (None if isinstance(v, float) and np.isnan(v) else v)
             for k, v in self.metrics().items()}
        doc = {"omegas": self.omegas.tolist(), "returns": self.returns.tolist(),
               "episodes": self.episodes, "reference": self.reference.tolist(),
               "front": self.front.tolist(), "metrics": m}
        if self.reference_front is not None:
            doc["reference_front"] = np.asarray(self.reference_front).tolist()
        text = json.dumps(doc, indent=2)
        if path is not None:
            atomic_write_text(path, text + "\n")
        return text

    def to_csv(self, path):
        K = self.returns.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"omega{k}" for k in range(K)] + [f"return{k}" for k in range(K)])
        for om, ret in zip(self.omegas, self.returns):
            w.writerow([repr(float(x)) for x in (*om, *ret)])
        atomic_write_text(path, buf.getvalue())


def preference_sweep(policy, env, omegas, episodes=100, seed=0, reference_front=None):
    """Average return vector per preference, plus front metrics."""
    omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
    if len(omegas) < 2:
        raise ValueError("a sweep needs at least two preferences")
    if omegas.shape[1] != env.K:
        raise ValueError(f"preferences have {omegas.shape[1]} entries, env has K={env.K}")
    if tuple(policy.agent_sizes) != tuple(env.agent_sizes):
        raise ValueError("policy and environment action spaces differ")
    root = np.random.SeedSequence(seed)
    returns = []
    for om, child in zip(omegas, root.spawn(len(omegas))):
        traces = batched_rollouts(env, policy, om, episodes, np.random.default_rng(child))
        returns.append(np.mean([t.ret for t in traces], axis=0))
    return SweepResult(omegas, np.array(returns), episodes, np.asarray(env.hv_reference, float),
                       None if reference_front is None else np.asarray(reference_front))


def visitation_heatmap(traces, grid_shape, cell=None, count="entered"):
    """Per-cell visit counts.

    ``count="entered"`` tallies the cell reached by every step (so terminal
    cells such as traps show up); ``"departed"`` tallies the cell each step
    starts from.  Either way the total equals the number of steps.
    """
    if grid_shape is None:
        raise ValueError("visitation heatmaps need a gridworld")
    rows, cols = grid_shape
    if cell is None:
        def cell(s):
            return divmod(s, cols)
    H = np.zeros((rows, cols), dtype=np.int64)
    for tr in traces:
        seq = tr.next_states if count == "entered" else tr.states
        for s in seq:
            r, c = cell(s)
            H[r, c] += 1
    return H


def heatmap_for_env(env, traces, count="entered"):
    if env.grid_shape is None:
        raise ValueError(f"{env.name} is not a gridworld")
    return visitation_heatmap(traces, env.grid_shape, env.cell, count)


def save_heatmap(H, path):
    text = "\n".join(",".join(str(int(v)) for v in row) for row in np.asarray(H)) + "\n"
    atomic_write_text(path, text)
