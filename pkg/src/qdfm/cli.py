"""Command-line interface: ``qdfm <command> [flags]``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import theory
from .critic import TabularCritic
from .dataio import (ConfigError, DatasetParseError, SchemaError, atomic_write_text,
                     env_for_dataset, fit_behavior, generate_dataset, load_dataset, save_dataset)
from .envs import REGISTRY, make_env
from .flowcore import RateField
from .metrics import (batched_rollouts, dataset_front, heatmap_for_env, hypervolume,
                      preference_sweep, save_heatmap, simplex_grid, tv_distance)
from .training import ConfigurationError, QDFMPolicy, TrainConfig, substream, train

log = logging.getLogger("qdfm")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------

def _floats(text):
    return [float(x) for x in str(text).replace(";", ",").split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _env_args(pairs):
    """``key=json`` pairs for environment constructors (e.g. ``mu=[0.5,0.5]``)."""
    out = {}
    for pair in pairs or []:
        key, sep, val = pair.partition("=")
        if not sep:
            raise UsageError(f"--env-arg expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _make_env(name, kwargs):
    try:
        return make_env(name, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"cannot build {name} environment from {kwargs}: {exc}") from None


def load_config_file(path):
    """Flat TOML key/value file; nested tables are rejected."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
    for k, v in data.items():
        if isinstance(v, dict):
            raise UsageError(f"{path}: nested table {k!r} not supported (flat keys only)")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _refuse_existing(path, force):
    if Path(path).exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


# -- commands --------------------------------------------------------------

def cmd_gen_data(args):
    if args.seed is None:
        raise UsageError("gen-data requires --seed")
    out = Path(args.out or f"{args.env}_seed{args.seed}.jsonl")
    _refuse_existing(out, args.force)
    env = _make_env(args.env, _env_args(args.env_arg))
    mix = json.loads(args.mix) if args.mix else None
    data = generate_dataset(env, mix, episodes=args.episodes, seed=args.seed, eps=args.eps)
    save_dataset(data, out, force=True)
    counts = np.bincount(data.a, minlength=data.n_actions)
    print(f"wrote {out}: {int(data.ep.max()) + 1} episodes, {len(data)} transitions")
    print("action counts: " + " ".join(f"{a}:{int(c)}" for a, c in enumerate(counts)))
    return EXIT_OK


TRAIN_KEYS = ("k1", "k2", "k3", "batch_size", "support_size", "beta", "k_renew", "n_steps",
              "lr_field", "lr_critic", "gamma", "hidden", "critic_hidden", "endpoint_source",
              "critic_preference_input", "critic_kind", "time_scaled", "time_power",
              "divergence", "smoothing", "seed")


def resolve_train_config(args, file_cfg):
    """Flags win over the config file, which wins over built-in defaults."""
    merged = {k: v for k, v in file_cfg.items() if k in TRAIN_KEYS}
    unknown = set(file_cfg) - set(TRAIN_KEYS) - {"dataset", "out_dir", "env_arg", "exact_critic"}
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    for k in TRAIN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    for k in ("hidden", "critic_hidden"):
        if isinstance(merged.get(k), str):
            merged[k] = tuple(_ints(merged[k]))
    if "seed" not in merged:
        raise UsageError("train requires --seed (flag or config file)")
    try:
        return TrainConfig.from_dict(merged).check()
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    file_cfg = load_config_file(args.config) if args.config else {}
    config = resolve_train_config(args, file_cfg)
    dataset_path = args.dataset or file_cfg.get("dataset")
    if dataset_path is None:
        raise UsageError("train requires --dataset")
    data = load_dataset(dataset_path)
    env = env_for_dataset(data, **_env_args(args.env_arg))
    out = Path(args.out_dir or file_cfg.get("out_dir") or "run")
    if (out / "field.bin").exists() and not (args.force or args.resume):
        raise UsageError(f"{out} already holds a trained model; pass --force or --resume")
    critic = None
    if args.exact_critic or file_cfg.get("exact_critic"):
        if env.name != "bandit":
            raise UsageError("--exact-critic is only available for bandit datasets")
        critic = TabularCritic(env.q_true, gamma=0.0, beta=max(config.beta, 1e-12))

    def progress(phase, step, loss):
        if step % 500 == 0:
            log.info("phase %d step %d loss %.5g", phase, step, loss)

    res = train(config, data, env, critic=critic, out_dir=out, resume=args.resume,
                progress=progress)
    res.field.save(out / "field.bin", source=res.policy.source)
    if config.k2 > 0 and not args.exact_critic and res.critic is not None:
        res.critic.save(out / "critic.bin")
    _write_json(out / "config.json", {"train": config.as_dict(), "dataset": str(Path(dataset_path).resolve()),
                                       "env": env.name, "env_kwargs": env.env_kwargs(),
                                       "policy_source": res.policy.source})
    for phase in (1, 2, 3):
        losses = res.losses(phase)
        if losses:
            tail = losses[-min(100, len(losses)):]
            print(f"phase {phase}: {len(losses)} steps, final-100 mean loss {np.mean(tail):.5g}")
    if env.name == "bandit" and env.K == 1:
        p = res.policy.terminal_distribution(0, [1.0], args.samples,
                                             substream(config.seed, "eval.bandit"))
        target = theory.boltzmann_exact(res.behavior.table[0], env.q_true[:, 0], config.beta)
        tv = tv_distance(p, target)
        print(f"terminal distribution {np.round(p, 4).tolist()}")
        print(f"Boltzmann target      {np.round(target, 4).tolist()}")
        print(f"TV = {tv:.4f}")
    print(f"checkpoints in {out}")
    return EXIT_OK


def _load_run(run_dir):
    run = Path(run_dir)
    cfg_path, field_path = run / "config.json", run / "field.bin"
    for p in (cfg_path, field_path):
        if not p.exists():
            raise UsageError(f"missing checkpoint {p}")
    meta = json.loads(cfg_path.read_text())
    field, head = RateField.load(field_path)
    data = load_dataset(meta["dataset"])
    env = _make_env(meta["env"], meta.get("env_kwargs", {}))
    behavior = fit_behavior(data, env.n_states, meta["train"]["smoothing"])
    policy = QDFMPolicy(field, behavior, env.encode, meta["train"]["n_steps"],
                        source=meta.get("policy_source", "behavior"))
    return meta, env, data, policy


def _omega_grid(args, K):
    if args.omega:
        return np.array([_floats(w) for w in args.omega])
    return simplex_grid(K, args.n_omega)


def _sweep(args, heatmaps):
    meta, env, data, policy = _load_run(args.run_dir)
    policy.strict = args.strict
    omegas = _omega_grid(args, env.K)
    out = Path(args.out_dir or Path(args.run_dir) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    front = dataset_front(data)
    res = preference_sweep(policy, env, omegas, args.episodes, args.seed, reference_front=front)
    res.to_json(out / "sweep.json")
    res.to_csv(out / "sweep.csv")
    if heatmaps and env.grid_shape is not None:
        root = np.random.SeedSequence(args.seed)
        for i, (om, child) in enumerate(zip(omegas, root.spawn(len(omegas)))):
            traces = batched_rollouts(env, policy, om, args.episodes, np.random.default_rng(child))
            save_heatmap(heatmap_for_env(env, traces), out / f"heatmap_{i:02d}.csv")
    m = res.metrics()
    self_ratio = hypervolume(front, env.hv_reference) / hypervolume(front, env.hv_reference)
    print(f"dataset front: {len(front)} points, HV ratio vs itself {self_ratio:.1f}")
    for om, ret in zip(res.omegas, res.returns):
        print(f"omega={np.round(om, 3).tolist()} return={np.round(ret, 3).tolist()}")
    print(f"HV={m['hv']:.4f} HV ratio={m['hv_ratio']:.4f} SP={m['sp']:.4f} ND={m['nd']}")
    print(f"results in {out}")
    return EXIT_OK


def cmd_eval(args):
    return _sweep(args, heatmaps=True)


def cmd_sweep_pref(args):
    return _sweep(args, heatmaps=args.heatmaps)


def cmd_sampler_check(args):
    pi = np.array(_floats(args.pi))
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise UsageError("--pi must lie on the simplex")
    alphas, steps = _floats(args.alpha), _ints(args.steps)
    p0 = np.array(_floats(args.p0)) if args.p0 else None
    cells = theory.sampler_check(pi, alphas, steps, args.samples, p0, args.seed, args.strict)
    ok = True
    rows = []
    for N in steps:
        prev = None
        for c in [c for c in cells if c.n_steps == N]:
            flag = ""
            if prev is not None and c.tv_target > prev + args.noise:
                flag = "  (TV to target increased)"
                ok = False
            prev = c.tv_target
            print(f"alpha={c.alpha:g} N={c.n_steps} TV_exact={c.tv_exact:.4f} "
                  f"TV_target={c.tv_target:.4f} clamped={c.clamped}{flag}")
            rows.append(c.__dict__)
            if c.tv_exact > args.tol:
                ok = False
    if args.out:
        _write_json(args.out, {"pi": pi.tolist(), "cells": rows})
    print("sampler check " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_grad_check(args):
    inst = theory.TinyInstance(n_actions=args.n_actions, n_nodes=args.nodes,
                               p1=np.random.default_rng(args.seed).dirichlet(
                                   np.ones(args.n_actions)))
    field = inst.make_field(seed=args.seed)
    if args.theta_dependent_weights:
        wfn, label = theory.theta_dependent_weights(inst), "theta-dependent weights"
    elif args.unweighted:
        wfn, label = theory.unit_weights, "unit weights"
    else:
        wfn, label = theory.random_weights(args.n_actions, seed=args.seed), "random weights"
    try:
        gap = theory.gradient_equivalence_check(field, wfn, inst)
    except theory.QuadratureError as exc:
        raise UsageError(str(exc)) from None
    print(f"{label}: |A|={args.n_actions}, {args.nodes} nodes, max relative gradient gap "
          f"{gap:.3e}")
    if gap > args.tol:
        if args.theta_dependent_weights:
            print("gap exceeds tolerance as expected: the equivalence requires weights that do "
                  "not depend on the model parameters; with parameter-dependent weights the "
                  "weighted variance term contributes its own gradient")
        return EXIT_CHECK
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="qdfm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="roll out scripted behavior policies to a JSONL file")
    g.add_argument("--env", required=True, choices=sorted(REGISTRY))
    g.add_argument("--episodes", type=int, default=200)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output path (default <env>_seed<seed>.jsonl)")
    g.add_argument("--mix", help='JSON policy mixture, e.g. \'{"left": 0.5, "right": 0.5}\'')
    g.add_argument("--eps", type=float, default=0.05, help="DST diver exploration rate")
    g.add_argument("--env-arg", action="append", metavar="KEY=JSON",
                   help="environment constructor argument (repeatable)")
    g.add_argument("--force", action="store_true", help="overwrite an existing output file")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the three training phases")
    t.add_argument("--dataset")
    t.add_argument("--out-dir")
    t.add_argument("--config", help="flat TOML file of TrainConfig keys (flags win)")
    t.add_argument("--seed", type=int)
    for name, typ in (("k1", int), ("k2", int), ("k3", int), ("batch-size", int),
                      ("support-size", int), ("beta", float), ("k-renew", int),
                      ("n-steps", int), ("lr-field", float), ("lr-critic", float),
                      ("gamma", float), ("time-power", float), ("smoothing", float)):
        t.add_argument(f"--{name}", type=typ)
    t.add_argument("--hidden", help="comma-separated hidden widths of the rate field")
    t.add_argument("--critic-hidden", help="comma-separated hidden widths of the critic")
    t.add_argument("--endpoint-source", choices=["behavior", "warmup", "current"])
    t.add_argument("--divergence", choices=["l2", "kl"])
    t.add_argument("--critic-kind", choices=["joint", "mixer"])
    t.add_argument("--exact-critic", action="store_true",
                   help="bandit only: use the true reward table instead of training a critic")
    t.add_argument("--env-arg", action="append", metavar="KEY=JSON")
    t.add_argument("--samples", type=int, default=100_000,
                   help="terminal samples for the bandit TV report")
    t.add_argument("--resume", action="store_true", help="reuse finished phase checkpoints")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a run on a preference grid"),
                              ("sweep-pref", cmd_sweep_pref, "preference sweep with metrics")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--run-dir", required=True)
        e.add_argument("--out-dir")
        e.add_argument("--omega", action="append", help="preference such as 0.5,0.5 "
                       "(repeatable; default: evenly spaced grid)")
        e.add_argument("--n-omega", type=int, default=3 if name == "eval" else 21)
        e.add_argument("--episodes", type=int, default=100)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--strict", action="store_true",
                       help="fail instead of clamping when h * rate exceeds 1")
        if name == "sweep-pref":
            e.add_argument("--heatmaps", action="store_true")
        e.set_defaults(func=func)

    s = sub.add_parser("sampler-check", help="Euler sampler versus the exact chain law")
    s.add_argument("--pi", default="0.7,0.3")
    s.add_argument("--alpha", default="0,0.5,1,2,5,10,20")
    s.add_argument("--steps", default="20")
    s.add_argument("--p0", help="initial distribution (default: point mass on argmin pi)")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=0.02)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--strict", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sampler_check)

    c = sub.add_parser("grad-check", help="exhaustive gradient-equivalence check")
    c.add_argument("--n-actions", type=int, default=3)
    c.add_argument("--nodes", type=int, default=16)
    c.add_argument("--seed", type=int, default=3)
    c.add_argument("--tol", type=float, default=1e-5)
    w = c.add_mutually_exclusive_group()
    w.add_argument("--theta-dependent-weights", action="store_true",
                   help="negative control: weights computed from the model itself")
    w.add_argument("--unweighted", action="store_true")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qdfm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ConfigurationError, SchemaError, DatasetParseError, KeyError,
            FileNotFoundError, FileExistsError) as exc:
        print(f"qdfm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
