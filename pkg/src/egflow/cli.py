"""Reproducible command-line entry points.

Subcommands: gen-data, train-flow, train-flowq, eval, oracle, bench-time.
Every run resolves its configuration (JSON file overlaid by CLI flags,
unknown keys rejected), writes `config.resolved.json` next to its
outputs, and exits 0 on success, 2 on configuration errors, 3 on numeric
failure. Re-running any subcommand from its resolved config reproduces
its outputs byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .checkpoint import load_checkpoint, save_checkpoint
from .envs import (OfflineDataset, gen_bandit_dataset, gen_gmm_dataset,
                   gen_pointmass_dataset, load_samples, save_samples,
                   spec_from_dict, spec_to_dict)
from .errors import (ConfigError, CorruptionError, DegenerateError,
                     DomainError, EgflowError, InputError, NumericError)
from .flow import FlowModel
from .flowq import (METRICS_FIELDS, CriticPair, FlowPolicy, FlowQConfig,
                    baseline_policy_update_backprop, policy_update,
                    sample_action, train_flowq)
from .guidance import SCHEDULE_KINDS, Schedule, resolve_energy_scale, fit_flow
from .oracles import bandit_policy_oracle, eval_policy_return, grid_posterior
from .rng import RngStreams, named_stream
from .tasks import (SAMPLE_TASKS, TRANSITION_TASKS, task_energy, task_grid,
                    task_spec)

SCHEDULE_ALIASES = {
    "linear": "linear_t",
    "quadratic": "quadratic_t2",
    "maxseek": "maxseek_t2_over_1mt",
    "learnable": "learnable",
}

_JSON_ALIASES = {"lambda": "lam"}


def _canonical_schedule(name: str) -> str:
    kind = SCHEDULE_ALIASES.get(name, name)
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"unknown schedule {name!r}")
    return kind


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in str(text).split(",") if part != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


# -- config plumbing -----------------------------------------------------------


def _coerce(value, target_type):
    if value is None:
        return None
    origin = getattr(target_type, "__origin__", None)
    if target_type is float:
        return float(value)
    if target_type is int:
        return int(value)
    if target_type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"expected a boolean, got {value!r}")
    if origin is tuple or target_type is tuple:
        if isinstance(value, str):
            return _parse_int_list(value)
        return tuple(value)
    return value


def resolve_config(cls, config_path: str | None, overrides: dict):
    """Layer JSON config under CLI overrides with strict key checking."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    merged: dict = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in raw.items():
            name = _JSON_ALIASES.get(key, key)
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            merged[name] = value
    for key, value in overrides.items():
        if value is not None:
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    kwargs = {}
    for name, f in fields.items():
        if name in merged:
            kwargs[name] = _coerce(merged[name], f.type if isinstance(f.type, type) else
                                   _FIELD_TYPES.get((cls.__name__, name), str))
        elif (f.default is dataclasses.MISSING
              and f.default_factory is dataclasses.MISSING):
            raise ConfigError(f"missing required config key {name!r}")
    return cls(**kwargs)


def resolved_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    if "lam" in out:
        out["lambda"] = out.pop("lam")
    return out


def config_hash(cfg) -> str:
    payload = {k: v for k, v in resolved_dict(cfg).items() if k != "out"}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_resolved(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps(resolved_dict(cfg), indent=2, sort_keys=True))


def write_csv(path, fields, rows) -> None:
    def fmt(value):
        if value == "" or value is None:
            return ""
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        return f"{float(value):.10g}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([fmt(row.get(name, "")) for name in fields])


# -- subcommand configs --------------------------------------------------------


@dataclass
class GenDataConfig:
    task: str
    out: str
    n: int = 100000
    episodes: int = 400
    quality: str = "mixed"
    seed: int = 0


@dataclass
class TrainFlowConfig:
    data: str
    out: str
    schedule: str = "maxseek_t2_over_1mt"
    lam: float = 1.0
    energy: str = "none"
    steps: int = 5000
    batch: int = 256
    lr: float = 3e-4
    hidden: tuple = (96, 96)
    activation: str = "mish"
    time_features: int = 0
    rescale: str = "learnable_only"
    sample_steps: int = 20
    log_interval: int = 100
    seed: int = 0


@dataclass
class TrainFlowQCliConfig:
    data: str
    out: str
    steps: int = 10000
    batch: int = 256
    lr: float = 3e-4
    gamma: float = 0.99
    rho: float = 0.995
    sample_steps: int = 20
    lam: float = 1.0
    schedule: str = "maxseek_t2_over_1mt"
    policy_hidden: tuple = (256, 256, 256)
    critic_hidden: tuple = (256, 256, 256)
    max_q_backup: bool = False
    n_candidates: int = 50
    reward_mode: str = "raw"
    policy_energy: str = "q1"
    rescale: str = "learnable_only"
    eval_interval: int = 1000
    eval_episodes: int = 20
    timing_in_metrics: bool = True
    seed: int = 0

    def to_flowq_config(self) -> FlowQConfig:
        return FlowQConfig(
            gradient_steps=self.steps, batch_size=self.batch, gamma=self.gamma,
            lr=self.lr, rho=self.rho, sample_steps=self.sample_steps,
            lam=self.lam, schedule_kind=_canonical_schedule(self.schedule),
            policy_hidden=tuple(self.policy_hidden),
            critic_hidden=tuple(self.critic_hidden),
            max_q_backup=self.max_q_backup, n_candidates=self.n_candidates,
            reward_mode=self.reward_mode, policy_energy=self.policy_energy,
            rescale_energy=self.rescale, eval_interval=self.eval_interval,
            eval_episodes=self.eval_episodes,
            timing_in_metrics=self.timing_in_metrics).validate()


@dataclass
class EvalConfig:
    checkpoint: str
    episodes: int = 20
    seed: int = 0
    out: str = ""


@dataclass
class OracleConfig:
    task: str
    out: str
    energy: str = "aligned"
    lam: float = 1.0
    grid_n: int = 256
    state: tuple = ()


@dataclass
class BenchConfig:
    out: str
    T: tuple = (5, 20, 100)
    steps: int = 1000
    batch: int = 128
    s_dim: int = 4
    a_dim: int = 2
    hidden: tuple = (64, 64)
    rounds: int = 5
    seed: int = 0


_FIELD_TYPES = {
    ("GenDataConfig", "n"): int, ("GenDataConfig", "episodes"): int,
    ("GenDataConfig", "seed"): int,
    ("TrainFlowConfig", "lam"): float, ("TrainFlowConfig", "steps"): int,
    ("TrainFlowConfig", "batch"): int, ("TrainFlowConfig", "lr"): float,
    ("TrainFlowConfig", "hidden"): tuple,
    ("TrainFlowConfig", "time_features"): int,
    ("TrainFlowConfig", "sample_steps"): int,
    ("TrainFlowConfig", "log_interval"): int, ("TrainFlowConfig", "seed"): int,
    ("TrainFlowQCliConfig", "steps"): int, ("TrainFlowQCliConfig", "batch"): int,
    ("TrainFlowQCliConfig", "lr"): float, ("TrainFlowQCliConfig", "gamma"): float,
    ("TrainFlowQCliConfig", "rho"): float,
    ("TrainFlowQCliConfig", "sample_steps"): int,
    ("TrainFlowQCliConfig", "lam"): float,
    ("TrainFlowQCliConfig", "policy_hidden"): tuple,
    ("TrainFlowQCliConfig", "critic_hidden"): tuple,
    ("TrainFlowQCliConfig", "max_q_backup"): bool,
    ("TrainFlowQCliConfig", "n_candidates"): int,
    ("TrainFlowQCliConfig", "eval_interval"): int,
    ("TrainFlowQCliConfig", "eval_episodes"): int,
    ("TrainFlowQCliConfig", "timing_in_metrics"): bool,
    ("TrainFlowQCliConfig", "seed"): int,
    ("EvalConfig", "episodes"): int, ("EvalConfig", "seed"): int,
    ("OracleConfig", "lam"): float, ("OracleConfig", "grid_n"): int,
    ("OracleConfig", "state"): tuple,
    ("BenchConfig", "T"): tuple, ("BenchConfig", "steps"): int,
    ("BenchConfig", "batch"): int, ("BenchConfig", "s_dim"): int,
    ("BenchConfig", "a_dim"): int, ("BenchConfig", "hidden"): tuple,
    ("BenchConfig", "rounds"): int, ("BenchConfig", "seed"): int,
}


# -- subcommands ---------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = resolve_config(GenDataConfig, args.config, {
        "task": args.task, "out": args.out, "n": args.n,
        "episodes": args.episodes, "quality": args.quality, "seed": args.seed})
    spec = task_spec(cfg.task)
    out = Path(cfg.out)
    if cfg.task in SAMPLE_TASKS:
        x = gen_gmm_dataset(spec, cfg.n, cfg.seed)
        save_samples(out, x, {"task": cfg.task, "spec": spec_to_dict(spec),
                              "seed": cfg.seed})
    elif cfg.task == "bandit1d":
        gen_bandit_dataset(spec, cfg.n, cfg.seed).save(out)
    else:
        gen_pointmass_dataset(spec, cfg.episodes, cfg.quality, cfg.seed).save(out)
    write_resolved(cfg, out)
    print(f"wrote dataset to {out}")
    return 0


def _load_sample_task(data_dir: str):
    x, manifest = load_samples(data_dir)
    task = manifest.get("task")
    if task not in SAMPLE_TASKS:
        raise InputError(f"dataset task {task!r} is not a sample task")
    return x, task


def _cmd_train_flow(args) -> int:
    cfg = resolve_config(TrainFlowConfig, args.config, {
        "data": args.data, "out": args.out, "schedule": args.schedule,
        "lam": getattr(args, "lam", None), "energy": args.energy,
        "steps": args.steps, "batch": args.batch, "lr": args.lr,
        "hidden": args.hidden, "time_features": args.time_features,
        "rescale": args.rescale, "sample_steps": args.sample_steps,
        "log_interval": args.log_interval, "seed": args.seed})
    x, task = _load_sample_task(cfg.data)
    energy = task_energy(task, cfg.energy)
    kind = _canonical_schedule(cfg.schedule)
    streams = RngStreams(cfg.seed)
    if kind == "learnable":
        sched = Schedule.learnable(cfg.lam, streams.get("init.schedule"))
    else:
        sched = Schedule(kind=kind, lam=cfg.lam)
    if energy is not None:
        sched = resolve_energy_scale(sched, x, energy, cfg.rescale)
    use_sched = None if (energy is None and cfg.lam == 0.0) else sched
    if use_sched is not None and energy is None and cfg.lam > 0:
        raise ConfigError("lambda > 0 requires --energy")
    model = FlowModel(dim=x.shape[1], hidden=tuple(cfg.hidden),
                      activation=cfg.activation,
                      time_features=cfg.time_features,
                      rng=streams.get("init.model"))
    rows = fit_flow(model, x, steps=cfg.steps, batch_size=cfg.batch,
                    lr=cfg.lr, streams=streams, sched=use_sched, energy=energy,
                    log_interval=cfg.log_interval)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", ("step", "loss"), rows)
    components = {"model": model.params}
    schedule_meta = {"kind": sched.kind, "lambda": sched.lam,
                     "energy_scale": sched.energy_scale, "energy": cfg.energy}
    if sched.kind == "learnable":
        components["schedule_f"] = sched.f_params
    save_checkpoint(out / "checkpoint", components, step=cfg.steps,
                    config_hash=config_hash(cfg), schedule=schedule_meta,
                    extra={"task": task, "dim": x.shape[1],
                           "time_features": cfg.time_features,
                           "sample_steps": cfg.sample_steps,
                           "run": "train-flow"})
    write_resolved(cfg, out)
    print(f"final loss {rows[-1]['loss']:.6g}; outputs in {out}")
    return 0


def _cmd_train_flowq(args) -> int:
    cfg = resolve_config(TrainFlowQCliConfig, args.config, {
        "data": args.data, "out": args.out, "steps": args.steps,
        "batch": args.batch, "lr": args.lr, "gamma": args.gamma,
        "rho": args.rho, "sample_steps": args.sample_steps,
        "lam": getattr(args, "lam", None), "schedule": args.schedule,
        "policy_hidden": args.policy_hidden, "critic_hidden": args.critic_hidden,
        "max_q_backup": args.max_q_backup, "n_candidates": args.n_candidates,
        "reward_mode": args.reward_mode, "policy_energy": args.policy_energy,
        "rescale": args.rescale, "eval_interval": args.eval_interval,
        "eval_episodes": args.eval_episodes,
        "timing_in_metrics": args.timing_in_metrics, "seed": args.seed})
    dataset = OfflineDataset.load(cfg.data)
    flowq_cfg = cfg.to_flowq_config()
    eval_env = None
    task = dataset.meta.get("task")
    if task and "spec" in dataset.meta:
        eval_env = spec_from_dict(task, dataset.meta["spec"])
    result = train_flowq(dataset, flowq_cfg, cfg.seed, eval_env=eval_env)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRICS_FIELDS, result.metrics)
    components = {
        "policy": result.policy.model.params,
        "critic1": result.critics.q1,
        "critic2": result.critics.q2,
        "target_policy": result.targets.policy,
        "target_critic1": result.targets.q1,
        "target_critic2": result.targets.q2,
    }
    schedule_meta = {"kind": result.schedule.kind, "lambda": result.schedule.lam,
                     "energy_scale": result.schedule.energy_scale}
    if result.schedule.kind == "learnable":
        components["schedule_f"] = result.schedule.f_params
    save_checkpoint(out / "checkpoint", components, step=cfg.steps,
                    config_hash=config_hash(cfg), schedule=schedule_meta,
                    extra={"task": task, "spec": dataset.meta.get("spec"),
                           "s_dim": dataset.s_dim, "a_dim": dataset.a_dim,
                           "sample_steps": cfg.sample_steps,
                           "run": "train-flowq"})
    write_resolved(cfg, out)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {cfg.steps} steps; last metrics {last}; outputs in {out}")
    return 0


def load_policy_checkpoint(path) -> tuple[FlowPolicy, dict]:
    components, manifest = load_checkpoint(path)
    extra = manifest.get("extra", {})
    if "policy" not in components:
        raise InputError("checkpoint does not hold a policy component")
    params = components["policy"]
    s_dim, a_dim = extra["s_dim"], extra["a_dim"]
    model = FlowModel(dim=a_dim, cond_dim=s_dim,
                      time_features=extra.get("time_features", 0), params=params)
    policy = FlowPolicy(s_dim, a_dim, sample_steps=extra.get("sample_steps", 20),
                        model=model)
    return policy, manifest


def _cmd_eval(args) -> int:
    cfg = resolve_config(EvalConfig, args.config, {
        "checkpoint": args.checkpoint, "episodes": args.episodes,
        "seed": args.seed, "out": args.out})
    policy, manifest = load_policy_checkpoint(cfg.checkpoint)
    extra = manifest.get("extra", {})
    if not extra.get("task") or not extra.get("spec"):
        raise InputError("checkpoint manifest lacks an environment spec")
    env = spec_from_dict(extra["task"], extra["spec"])
    rng = named_stream(cfg.seed, "eval.actions")
    mean, sd = eval_policy_return(lambda s: sample_action(policy, s, rng),
                                  env, cfg.episodes, cfg.seed)
    print(f"eval return mean {mean:.6g} sd {sd:.6g} over {cfg.episodes} episodes")
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "eval.csv", ("episodes", "return_mean", "return_sd"),
                  [{"episodes": cfg.episodes, "return_mean": mean,
                    "return_sd": sd}])
        write_resolved(cfg, out)
    return 0


def _cmd_oracle(args) -> int:
    cfg = resolve_config(OracleConfig, args.config, {
        "task": args.task, "out": args.out, "energy": args.energy,
        "lam": getattr(args, "lam", None), "grid_n": args.grid_n,
        "state": tuple(args.state) if args.state is not None else None})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = task_grid(cfg.task, cfg.grid_n)
    if cfg.task == "bandit1d":
        spec = task_spec(cfg.task)
        state = np.asarray(cfg.state if cfg.state else
                           [0.0] * spec.state_dim, dtype=np.float64)
        density = bandit_policy_oracle(state, spec, cfg.lam, grid)
    else:
        spec = task_spec(cfg.task)
        energy = task_energy(cfg.task, cfg.energy)
        if energy is None:
            raise ConfigError("oracle needs a named energy")
        density = grid_posterior(spec.pdf, energy, cfg.lam, grid)
    density.to_csv(out / "density.csv")
    write_resolved(cfg, out)
    print(f"wrote oracle density to {out / 'density.csv'}")
    return 0


def bench_policy_update_time(T_list, steps: int = 1000, batch: int = 128,
                             s_dim: int = 4, a_dim: int = 2, hidden=(64, 64),
                             rounds: int = 5, seed: int = 0) -> list[dict]:
    """Wall-clock of `steps` guided policy updates vs backprop-through-
    sampling updates, per sampling-step count T.

    Rounds are interleaved across T values so slow clock drift cancels
    instead of biasing one column.
    """
    if not T_list:
        raise InputError("need at least one T value")
    if steps < 1 or rounds < 1:
        raise InputError("steps and rounds must be positive")
    T_list = [int(t) for t in T_list]
    if min(T_list) < 1:
        raise InputError("sampling step counts must be >= 1")
    streams = RngStreams(seed)
    rng = streams.get("bench.data")
    s = rng.uniform(-1, 1, (batch, s_dim)).astype(np.float32)
    a = rng.uniform(-1, 1, (batch, a_dim)).astype(np.float32)
    r = rng.standard_normal(batch).astype(np.float32)
    batch_data = (s, a, r, s, np.zeros(batch, dtype=np.float32))
    critics = CriticPair(s_dim, a_dim, hidden=hidden, activation="tanh",
                         rng=streams.get("init.critic"))
    cfg = FlowQConfig(policy_hidden=tuple(hidden), critic_hidden=tuple(hidden),
                      batch_size=batch, lam=1.0)

    setups = {}
    for T in T_list:
        for method in ("flowq", "backprop"):
            policy = FlowPolicy(s_dim, a_dim, hidden=hidden, sample_steps=T,
                                rng=streams.get("init.policy"))
            opt = AdamState.for_params(policy.model.params.arrays(), lr=3e-4)
            sched = Schedule(kind="maxseek_t2_over_1mt", lam=1.0)
            setups[(T, method)] = (policy, opt, sched,
                                   streams.get(f"bench.{method}.{T}"))

    def one_step(T: int, method: str) -> None:
        policy, opt, sched, step_rng = setups[(T, method)]
        if method == "flowq":
            policy_update(policy, batch_data, critics, sched, opt, step_rng, cfg)
        else:
            baseline_policy_update_backprop(policy, batch_data, critics, T,
                                            opt, step_rng)

    for T in T_list:  # warmup
        for method in ("flowq", "backprop"):
            for _ in range(3):
                one_step(T, method)

    totals = {key: 0.0 for key in setups}
    chunk = max(1, steps // rounds)
    done = {key: 0 for key in setups}
    for rnd in range(rounds):
        for T in T_list:
            for method in ("flowq", "backprop"):
                todo = (steps - done[(T, method)]) if rnd == rounds - 1 else chunk
                t0 = time.perf_counter()
                for _ in range(todo):
                    one_step(T, method)
                totals[(T, method)] += time.perf_counter() - t0
                done[(T, method)] += todo
    return [{"T": T, "flowq_ms": totals[(T, "flowq")] * 1e3,
             "backprop_ms": totals[(T, "backprop")] * 1e3}
            for T in T_list]


def _cmd_bench_time(args) -> int:
    cfg = resolve_config(BenchConfig, args.config, {
        "out": args.out, "T": args.T, "steps": args.steps, "batch": args.batch,
        "s_dim": args.s_dim, "a_dim": args.a_dim, "hidden": args.hidden,
        "rounds": args.rounds, "seed": args.seed})
    rows = bench_policy_update_time(cfg.T, steps=cfg.steps, batch=cfg.batch,
                                    s_dim=cfg.s_dim, a_dim=cfg.a_dim,
                                    hidden=tuple(cfg.hidden), rounds=cfg.rounds,
                                    seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "bench.csv", ("T", "flowq_ms", "backprop_ms"), rows)
    write_resolved(cfg, out)
    for row in rows:
        print(f"T={row['T']}: flowq {row['flowq_ms']:.1f} ms, "
              f"backprop {row['backprop_ms']:.1f} ms")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egflow")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a dataset directory")
    p.add_argument("--task", choices=sorted(SAMPLE_TASKS + TRANSITION_TASKS))
    p.add_argument("--n", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--quality", choices=("random", "medium", "mixed"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("train-flow", help="train a (guided) flow model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--schedule")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--energy")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden")
    p.add_argument("--time-features", dest="time_features", type=int)
    p.add_argument("--rescale", choices=("learnable_only", "all", "off"))
    p.add_argument("--sample-steps", dest="sample_steps", type=int)
    p.add_argument("--log-interval", dest="log_interval", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")

    p = sub.add_parser("train-flowq", help="train FlowQ on a transition dataset")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--sample-steps", dest="sample_steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--schedule")
    p.add_argument("--policy-hidden", dest="policy_hidden")
    p.add_argument("--critic-hidden", dest="critic_hidden")
    p.add_argument("--max-q-backup", dest="max_q_backup",
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--n-candidates", dest="n_candidates", type=int)
    p.add_argument("--reward-mode", dest="reward_mode",
                   choices=("raw", "standardize"))
    p.add_argument("--policy-energy", dest="policy_energy",
                   choices=("q1", "min_twin"))
    p.add_argument("--rescale", choices=("learnable_only", "all", "off"))
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    p.add_argument("--timing-in-metrics", dest="timing_in_metrics",
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("oracle", help="write a grid posterior CSV")
    p.add_argument("--task")
    p.add_argument("--energy")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--grid-n", dest="grid_n", type=int)
    p.add_argument("--state", type=float, nargs="*")
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("bench-time", help="policy-update timing benchmark")
    p.add_argument("--T", dest="T")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--s-dim", dest="s_dim", type=int)
    p.add_argument("--a-dim", dest="a_dim", type=int)
    p.add_argument("--hidden")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")

    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-flow": _cmd_train_flow,
    "train-flowq": _cmd_train_flowq,
    "eval": _cmd_eval,
    "oracle": _cmd_oracle,
    "bench-time": _cmd_bench_time,
}


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, InputError, CorruptionError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DegenerateError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except EgflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
