"""Offline RL with an energy-guided flow policy.

Per gradient step on a transition batch:

* critics regress onto r + (1-done) * gamma * min-twin target values at
  actions sampled from the target flow policy (one ODE sample per
  transition, or a max over candidates when max_q_backup is on);
* the flow policy takes one guided matching step with energy
  E(a) = -Q(s, a), so improving the policy never samples actions;
* target networks track the online ones with Polyak averaging.

A backprop-through-sampling baseline update (sample actions with the
full ODE kept on the tape, ascend mean Q plus a cloning regularizer) is
included only as the timing contrast.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (AdamState, MlpParams, Tape, adam_step, backward,
                       mlp_forward)
from .envs import OfflineDataset
from .errors import DimensionError, InputError, NumericError
from .flow import FlowModel, cfm_loss_node, euler_integrate, sample_times
from .guidance import Schedule, egfm_loss_node, fd_hvp
from .oracles import eval_policy_return
from .rng import RngStreams, named_stream

Array = np.ndarray

METRICS_FIELDS = ("step", "critic_loss", "policy_loss", "eval_return_mean",
                  "eval_return_sd", "wall_ms_policy_update")


@dataclass
class FlowQConfig:
    """Hyperparameters; defaults follow the reference configuration."""

    gradient_steps: int = 10000
    batch_size: int = 256
    gamma: float = 0.99
    lr: float = 3e-4
    rho: float = 0.995  # target-net retention, i.e. 1 - target learning rate
    sample_steps: int = 20
    lam: float = 1.0
    schedule_kind: str = "maxseek_t2_over_1mt"
    schedule_hidden: tuple[int, ...] = (32, 32)
    policy_hidden: tuple[int, ...] = (256, 256, 256)
    policy_activation: str = "mish"
    critic_hidden: tuple[int, ...] = (256, 256, 256)
    critic_activation: str = "tanh"
    max_q_backup: bool = False
    n_candidates: int = 50
    reward_mode: str = "raw"
    policy_energy: str = "q1"  # or "min_twin"
    guidance_sign: float = 1.0  # +1: shift toward higher Q
    rescale_energy: str = "learnable_only"
    grad_clip: float | None = None
    time_features: int = 0
    eval_interval: int = 1000
    eval_episodes: int = 20
    timing_in_metrics: bool = True

    def validate(self) -> "FlowQConfig":
        if self.gradient_steps < 1 or self.batch_size < 1:
            raise InputError("gradient_steps and batch_size must be positive")
        if not (0.0 < self.gamma <= 1.0):
            raise InputError("gamma must lie in (0, 1]")
        if not (0.0 < self.rho < 1.0):
            raise InputError("rho must lie in (0, 1)")
        if self.sample_steps < 1 or self.n_candidates < 1:
            raise InputError("sample_steps and n_candidates must be >= 1")
        if self.lam < 0 or self.lr <= 0:
            raise InputError("lambda must be >= 0 and lr > 0")
        if self.reward_mode not in ("raw", "standardize"):
            raise InputError(f"unknown reward_mode {self.reward_mode!r}")
        if self.policy_energy not in ("q1", "min_twin"):
            raise InputError(f"unknown policy_energy {self.policy_energy!r}")
        if self.guidance_sign not in (1.0, -1.0):
            raise InputError("guidance_sign must be +1 or -1")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise InputError("eval_interval and eval_episodes must be >= 1")
        return self


class CriticPair:
    """Two independent (s, a) -> scalar MLPs."""

    def __init__(self, s_dim: int, a_dim: int, hidden=(256, 256, 256),
                 activation: str = "tanh", rng: np.random.Generator | None = None,
                 q1: MlpParams | None = None, q2: MlpParams | None = None):
        sizes = [s_dim + a_dim, *hidden, 1]
        self.q1 = q1 if q1 is not None else MlpParams.create(sizes, activation, rng)
        self.q2 = q2 if q2 is not None else MlpParams.create(sizes, activation, rng)

    def value(self, params: MlpParams, s: Array, a: Array) -> Array:
        return mlp_forward(params, np.concatenate([s, a], axis=1)).ravel()

    def min_value(self, s: Array, a: Array, q1: MlpParams | None = None,
                  q2: MlpParams | None = None) -> Array:
        q1 = self.q1 if q1 is None else q1
        q2 = self.q2 if q2 is None else q2
        return np.minimum(self.value(q1, s, a), self.value(q2, s, a))


class FlowPolicy:
    """State-conditioned flow model over actions, sampled by Euler ODE."""

    def __init__(self, s_dim: int, a_dim: int, hidden=(256, 256, 256),
                 activation: str = "mish", sample_steps: int = 20,
                 time_features: int = 0, rng: np.random.Generator | None = None,
                 model: FlowModel | None = None):
        self.model = model if model is not None else FlowModel(
            dim=a_dim, hidden=hidden, activation=activation, cond_dim=s_dim,
            time_features=time_features, rng=rng)
        self.sample_steps = int(sample_steps)

    @property
    def a_dim(self) -> int:
        return self.model.dim

    @property
    def s_dim(self) -> int:
        return self.model.cond_dim


def sample_action(policy: FlowPolicy, s: Array, rng: np.random.Generator,
                  params: MlpParams | None = None, steps: int | None = None) -> Array:
    """ODE-sample actions for a state batch and clip to [-1, 1]."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float32))
    a0 = rng.standard_normal((s.shape[0], policy.a_dim)).astype(np.float32)
    a = euler_integrate(policy.model.field(cond=s, params=params), a0,
                        steps if steps is not None else policy.sample_steps)
    return np.clip(a, -1.0, 1.0)


@dataclass
class TargetNets:
    """Frozen Polyak copies of the policy and both critics."""

    policy: MlpParams
    q1: MlpParams
    q2: MlpParams
    rho: float = 0.995

    @classmethod
    def from_online(cls, policy: FlowPolicy, critics: CriticPair,
                    rho: float) -> "TargetNets":
        return cls(policy=policy.model.params.copy(), q1=critics.q1.copy(),
                   q2=critics.q2.copy(), rho=rho)


def polyak_update(targets: TargetNets, policy: FlowPolicy, critics: CriticPair,
                  rho: float | None = None) -> TargetNets:
    """targets <- rho * targets + (1 - rho) * online, elementwise in place."""
    rho = targets.rho if rho is None else rho
    if not (0.0 < rho < 1.0):
        raise InputError("rho must lie in (0, 1)")
    pairs = [(targets.policy, policy.model.params), (targets.q1, critics.q1),
             (targets.q2, critics.q2)]
    for tgt, online in pairs:
        for t_arr, o_arr in zip(tgt.arrays(), online.arrays()):
            if t_arr.shape != o_arr.shape:
                raise DimensionError("target/online parameter shapes differ")
            t_arr *= rho
            t_arr += (1.0 - rho) * o_arr
    return targets


def critic_target(batch, policy: FlowPolicy, targets: TargetNets,
                  config: FlowQConfig, rng: np.random.Generator) -> Array:
    """Bellman targets under the frozen target nets (no gradients flow).

    Default: one sampled next action per transition. With max_q_backup:
    the max over n_candidates of the min-twin value.
    """
    s, a, r, s2, done = batch
    critics_view = CriticPair(policy.s_dim, policy.a_dim, q1=targets.q1, q2=targets.q2)
    if config.max_q_backup:
        n = config.n_candidates
        s2_rep = np.repeat(s2, n, axis=0)
        a2 = sample_action(policy, s2_rep, rng, params=targets.policy)
        q = critics_view.min_value(s2_rep, a2).reshape(len(s2), n).max(axis=1)
    else:
        a2 = sample_action(policy, s2, rng, params=targets.policy)
        q = critics_view.min_value(s2, a2)
    return (r + (1.0 - done) * config.gamma * q).astype(np.float32)


def critic_update(critics: CriticPair, batch, targets_q: Array,
                  opt1: AdamState, opt2: AdamState) -> float:
    """One Adam step per twin on the squared Bellman error; returns the sum."""
    s, a = batch[0], batch[1]
    sa = np.concatenate([s, a], axis=1)
    y = targets_q.reshape(-1, 1)
    total = 0.0
    for params, opt in ((critics.q1, opt1), (critics.q2, opt2)):
        tape = Tape()
        q = mlp_forward(params, sa, tape)
        loss = tape.mean(tape.square(tape.sub(q, y)))
        total += float(loss.value)
        grads = backward(tape, loss)
        adam_step(params.arrays(), grads.mlp(params), opt)
    return total


class CriticEnergy:
    """E(a) = -sign * Q(s, a) for a fixed state batch.

    Gradients come from one reverse pass through the critic; the HVP uses
    central differences of that gradient (no second-order tape support
    needed, and the accuracy suffices for a regression target).
    """

    def __init__(self, critics: CriticPair, s: Array, mode: str = "q1",
                 sign: float = 1.0):
        self.critics = critics
        self.s = np.asarray(s, dtype=np.float32)
        self.mode = mode
        self.sign = float(sign)

    def _q_params(self) -> list[MlpParams]:
        if self.mode == "q1":
            return [self.critics.q1]
        return [self.critics.q1, self.critics.q2]

    def value(self, a: Array) -> Array:
        a = np.asarray(a, dtype=np.float32)
        vals = [self.critics.value(p, self.s, a) for p in self._q_params()]
        q = vals[0] if len(vals) == 1 else np.minimum(vals[0], vals[1])
        return -self.sign * q

    def _q_grad(self, a: Array) -> Array:
        a = np.asarray(a, dtype=np.float32)
        grads, vals = [], []
        for params in self._q_params():
            tape = Tape()
            leaf = tape.leaf(a)
            q = mlp_forward(params, tape.concat([self.s, leaf]), tape)
            g = backward(tape, tape.sum(q))  # rows independent: sum trick
            grads.append(g.of(leaf))
            vals.append(q.value.ravel())
        if len(grads) == 1:
            return grads[0]
        pick = (vals[0] <= vals[1])[:, None]
        return np.where(pick, grads[0], grads[1])

    def grad(self, a: Array) -> Array:
        return -self.sign * self._q_grad(a)

    def hvp(self, a: Array, v: Array) -> Array:
        return fd_hvp(self.grad, np.asarray(a, dtype=np.float32),
                      np.asarray(v, dtype=np.float32)).astype(np.float32)


def policy_update(policy: FlowPolicy, batch, critics: CriticPair | None,
                  sched: Schedule, opt: AdamState, rng: np.random.Generator,
                  config: FlowQConfig, sched_opt: AdamState | None = None) -> float:
    """One guided matching step with E = -Q; never samples from the policy."""
    s, a1 = batch[0], batch[1]
    n = a1.shape[0]
    t = sample_times(rng, n)
    noise = rng.standard_normal(a1.shape).astype(np.float32)
    energy = None
    if sched.lam != 0.0:
        energy = CriticEnergy(critics, s, mode=config.policy_energy,
                              sign=config.guidance_sign)
    tape = Tape()
    loss_node = egfm_loss_node(tape, policy.model, a1, energy, sched,
                               (t, noise), cond=s)
    loss = float(loss_node.value)
    grads = backward(tape, loss_node)
    adam_step(policy.model.params.arrays(), grads.mlp(policy.model.params), opt)
    if sched.kind == "learnable" and sched_opt is not None:
        adam_step(sched.f_params.arrays(), grads.mlp(sched.f_params), sched_opt)
    return loss


def baseline_policy_update_backprop(policy: FlowPolicy, batch,
                                    critics: CriticPair, steps: int,
                                    opt: AdamState, rng: np.random.Generator) -> float:
    """Timing-contrast update: backprop through a full ODE action sample.

    Loss: -mean Q1(s, a_sampled) + conditional matching regularizer. Tape
    length (and memory) grows linearly with `steps`; that is the point.
    """
    if steps < 1:
        raise InputError("need at least one sampling step")
    s, a1 = batch[0], batch[1]
    n = a1.shape[0]
    tape = Tape()
    x = rng.standard_normal((n, policy.a_dim)).astype(np.float32)
    node = None
    dt = 1.0 / steps
    for k in range(steps):
        u = policy.model.velocity_node(tape, node if node is not None else x,
                                       k / steps, cond=s)
        step_node = tape.scale(u, dt)
        node = tape.add(node if node is not None else x, step_node)
    q = mlp_forward(critics.q1, tape.concat([s, node]), tape)
    q_term = tape.scale(tape.mean(q), -1.0)
    t = sample_times(rng, n)
    noise = rng.standard_normal(a1.shape).astype(np.float32)
    reg = cfm_loss_node(tape, policy.model, a1, (t, noise), cond=s)
    loss_node = tape.add(q_term, reg)
    loss = float(loss_node.value)
    grads = backward(tape, loss_node)
    adam_step(policy.model.params.arrays(), grads.mlp(policy.model.params), opt)
    return loss


@dataclass
class FlowQResult:
    policy: FlowPolicy
    critics: CriticPair
    targets: TargetNets
    schedule: Schedule
    metrics: list[dict] = field(default_factory=list)


def _make_schedule(config: FlowQConfig, streams: RngStreams) -> Schedule:
    if config.schedule_kind == "learnable":
        return Schedule.learnable(config.lam, streams.get("init.schedule"),
                                  hidden=config.schedule_hidden)
    return Schedule(kind=config.schedule_kind, lam=config.lam)


def train_flowq(dataset: OfflineDataset, config: FlowQConfig, seed: int,
                eval_env=None) -> FlowQResult:
    """Alternate critic, guided-policy and target updates over the dataset."""
    config = config.validate()
    if config.reward_mode == "standardize":
        dataset, _, _ = dataset.standardized_rewards()
    streams = RngStreams(seed)
    policy = FlowPolicy(dataset.s_dim, dataset.a_dim, hidden=config.policy_hidden,
                        activation=config.policy_activation,
                        sample_steps=config.sample_steps,
                        time_features=config.time_features,
                        rng=streams.get("init.policy"))
    critics = CriticPair(dataset.s_dim, dataset.a_dim, hidden=config.critic_hidden,
                         activation=config.critic_activation,
                         rng=streams.get("init.critic"))
    targets = TargetNets.from_online(policy, critics, config.rho)
    sched = _make_schedule(config, streams)
    # The RL energy is the evolving critic, so the dataset rescale 1/E|E|
    # becomes a running estimate of the Bellman-target magnitude.
    rescale_active = config.lam > 0 and (
        config.rescale_energy == "all"
        or (config.rescale_energy == "learnable_only"
            and sched.kind == "learnable"))
    scale_ema: float | None = None
    opt_pi = AdamState.for_params(policy.model.params.arrays(), lr=config.lr,
                                  grad_clip=config.grad_clip)
    opt_q1 = AdamState.for_params(critics.q1.arrays(), lr=config.lr,
                                  grad_clip=config.grad_clip)
    opt_q2 = AdamState.for_params(critics.q2.arrays(), lr=config.lr,
                                  grad_clip=config.grad_clip)
    opt_sched = None
    if sched.kind == "learnable":
        opt_sched = AdamState.for_params(sched.f_params.arrays(), lr=config.lr)
    batch_rng = streams.get("train.batch")
    critic_rng = streams.get("train.critic")
    policy_rng = streams.get("train.policy")
    metrics: list[dict] = []
    acc_c = acc_p = acc_w = 0.0
    count = 0
    eval_idx = 0
    for step in range(1, config.gradient_steps + 1):
        batch = dataset.sample(config.batch_size, batch_rng)
        y = critic_target(batch, policy, targets, config, critic_rng)
        c_loss = critic_update(critics, batch, y, opt_q1, opt_q2)
        if rescale_active:
            mag = float(np.mean(np.abs(y)))
            scale_ema = mag if scale_ema is None else 0.99 * scale_ema + 0.01 * mag
            sched.energy_scale = max(scale_ema, 1e-6)
        t0 = time.perf_counter()
        p_loss = policy_update(policy, batch, critics, sched, opt_pi,
                               policy_rng, config, sched_opt=opt_sched)
        acc_w += (time.perf_counter() - t0) * 1e3
        polyak_update(targets, policy, critics)
        if not (np.isfinite(c_loss) and np.isfinite(p_loss)):
            raise NumericError(f"non-finite loss at step {step}")
        acc_c += c_loss
        acc_p += p_loss
        count += 1
        if step % config.eval_interval == 0 or step == config.gradient_steps:
            row = {"step": step, "critic_loss": acc_c / count,
                   "policy_loss": acc_p / count,
                   "eval_return_mean": "", "eval_return_sd": "",
                   "wall_ms_policy_update":
                       acc_w / count if config.timing_in_metrics else 0.0}
            if eval_env is not None:
                eval_idx += 1
                eval_seed = streams.get("eval").integers(0, 2**63 - 1)
                mean, sd = eval_policy_return(
                    _policy_callable(policy, streams.seed, eval_idx),
                    eval_env, config.eval_episodes, int(eval_seed))
                row["eval_return_mean"] = mean
                row["eval_return_sd"] = sd
            metrics.append(row)
            acc_c = acc_p = acc_w = 0.0
            count = 0
            if step == config.gradient_steps:
                break
    return FlowQResult(policy=policy, critics=critics, targets=targets,
                       schedule=sched, metrics=metrics)


def _policy_callable(policy: FlowPolicy, seed: int, eval_idx: int):
    rng = named_stream(seed, f"eval.actions.{eval_idx}")

    def act(s: Array) -> Array:
        return sample_action(policy, s, rng)

    return act


def train_bc(dataset: OfflineDataset, config: FlowQConfig, seed: int,
             eval_env=None) -> FlowQResult:
    """Pure behavior cloning: the same flow policy trained by unguided
    matching on (s, a) pairs, sharing the stream layout of `train_flowq`."""
    config = config.validate()
    if config.reward_mode == "standardize":
        dataset, _, _ = dataset.standardized_rewards()
    streams = RngStreams(seed)
    policy = FlowPolicy(dataset.s_dim, dataset.a_dim, hidden=config.policy_hidden,
                        activation=config.policy_activation,
                        sample_steps=config.sample_steps,
                        time_features=config.time_features,
                        rng=streams.get("init.policy"))
    opt_pi = AdamState.for_params(policy.model.params.arrays(), lr=config.lr,
                                  grad_clip=config.grad_clip)
    batch_rng = streams.get("train.batch")
    policy_rng = streams.get("train.policy")
    sched = Schedule(kind="linear_t", lam=0.0)
    metrics: list[dict] = []
    acc_p = acc_w = 0.0
    count = 0
    eval_idx = 0
    for step in range(1, config.gradient_steps + 1):
        batch = dataset.sample(config.batch_size, batch_rng)
        t0 = time.perf_counter()
        p_loss = policy_update(policy, batch, None, sched, opt_pi,
                               policy_rng, config)
        acc_w += (time.perf_counter() - t0) * 1e3
        if not np.isfinite(p_loss):
            raise NumericError(f"non-finite loss at step {step}")
        acc_p += p_loss
        count += 1
        if step % config.eval_interval == 0 or step == config.gradient_steps:
            row = {"step": step, "critic_loss": "", "policy_loss": acc_p / count,
                   "eval_return_mean": "", "eval_return_sd": "",
                   "wall_ms_policy_update":
                       acc_w / count if config.timing_in_metrics else 0.0}
            if eval_env is not None:
                eval_idx += 1
                eval_seed = streams.get("eval").integers(0, 2**63 - 1)
                mean, sd = eval_policy_return(
                    _policy_callable(policy, streams.seed, eval_idx),
                    eval_env, config.eval_episodes, int(eval_seed))
                row["eval_return_mean"] = mean
                row["eval_return_sd"] = sd
            metrics.append(row)
            acc_p = acc_w = 0.0
            count = 0
            if step == config.gradient_steps:
                break
    critics = CriticPair(dataset.s_dim, dataset.a_dim,
                         hidden=config.critic_hidden,
                         activation=config.critic_activation,
                         rng=streams.get("init.critic"))
    targets = TargetNets.from_online(policy, critics, config.rho)
    return FlowQResult(policy=policy, critics=critics, targets=targets,
                       schedule=sched, metrics=metrics)
