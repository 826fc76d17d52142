"""Energy-guided conditional probability paths and the guided matching loss.

For a data point x1 and an energy E with guidance strength lam(t), the
guided conditional path is the Gaussian

    mean   alpha_c(t, x1) = t*x1 - (1-t)^2 lam(t) gradE(t*x1)
    sd     sigma_c(t)     = 1 - t

so samples are x_t = alpha_c + (1-t)*noise and the matching target is

    u_hat = (x1 - x_t)/(1-t)
            + (1-t)[lam(t) - (1-t)*dlam(t)] gradE(t*x1)
            - (1-t)^2 lam(t) hessE(t*x1) x1.

lam(t) = h(t) * lam / energy_scale with h one of four kinds: t, t^2,
t^2/(1-t) (max-seeking, unbounded at t=1) or the learnable
h(t) = t + t(1-t) f(t) with a small MLP f, which pins h(0)=0 and h(1)=1.

The products (1-t)^2 lam(t) and (1-t)[lam(t) - (1-t) dlam(t)] are always
evaluated in per-kind simplified form (for the max-seeking kind they
reduce to lam*t^2*(1-t) and -2*lam*t*(1-t)), which avoids catastrophic
cancellation near t=1 and makes the t=1 limits exact zeros.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .autodiff import (AdamState, MlpParams, Node, Tape, adam_step, backward,
                       mlp_forward, require_finite)
from .errors import (DomainError, InputError, NumericError, SingularityError)
from .flow import FlowModel, cfm_draws, cfm_loss_node

Array = np.ndarray

SCHEDULE_KINDS = ("linear_t", "quadratic_t2", "maxseek_t2_over_1mt", "learnable")

# Clamp applied when evaluating the max-seeking h(t) itself; the shifted
# products need no clamp because their simplified forms are polynomial.
MAXSEEK_T_CAP = 1.0 - 1e-5

# Step used for the on-tape derivative of the learnable f during training.
LEARNABLE_FD_STEP = 1e-3


class EnergyFn(Protocol):
    """Energy with first and second derivatives along the last axis."""

    def value(self, y: Array) -> Array: ...

    def grad(self, y: Array) -> Array: ...

    def hvp(self, y: Array, v: Array) -> Array: ...


class QuadraticEnergy:
    """E(x) = 0.5 * scale * (x - center)^T A (x - center) with symmetric A."""

    def __init__(self, center, matrix=None, scale: float = 1.0):
        self.center = np.atleast_1d(np.asarray(center, dtype=np.float64))
        d = self.center.shape[0]
        self.matrix = np.eye(d) if matrix is None else np.asarray(matrix, dtype=np.float64)
        if self.matrix.shape != (d, d):
            raise InputError("quadratic energy matrix/center dims differ")
        if not np.allclose(self.matrix, self.matrix.T):
            raise InputError("quadratic energy matrix must be symmetric")
        self.scale = float(scale)

    def value(self, y: Array) -> Array:
        dev = np.asarray(y) - self.center
        return 0.5 * self.scale * np.sum((dev @ self.matrix) * dev, axis=-1)

    def grad(self, y: Array) -> Array:
        dev = np.asarray(y) - self.center
        return (self.scale * (dev @ self.matrix)).astype(np.asarray(y).dtype)

    def hvp(self, y: Array, v: Array) -> Array:
        return (self.scale * (np.asarray(v) @ self.matrix)).astype(np.asarray(v).dtype)


class LinearEnergy:
    """E(x) = coef . x (zero curvature)."""

    def __init__(self, coef):
        self.coef = np.atleast_1d(np.asarray(coef, dtype=np.float64))

    def value(self, y: Array) -> Array:
        return np.sum(np.asarray(y) * self.coef, axis=-1)

    def grad(self, y: Array) -> Array:
        y = np.asarray(y)
        return np.broadcast_to(self.coef.astype(y.dtype), y.shape).copy()

    def hvp(self, y: Array, v: Array) -> Array:
        return np.zeros_like(np.asarray(v))


def fd_hvp(grad_fn, y: Array, v: Array) -> Array:
    """Hessian-vector product by central differences of a gradient function.

    Step h = 1e-3 * (1 + |y|) / (1 + |v|) per row, so the probe y +/- h*v
    moves a fixed relative distance regardless of the scales of y and v.
    """
    y = np.asarray(y)
    v = np.asarray(v)
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    h = 1e-3 * (1.0 + ny) / (1.0 + nv)
    gp = grad_fn(y + h * v)
    gm = grad_fn(y - h * v)
    return (gp - gm) / (2.0 * h)


@dataclass
class Schedule:
    """Guidance-strength profile lam(t) = h(t) * lam / energy_scale."""

    kind: str
    lam: float
    energy_scale: float = 1.0
    f_params: MlpParams | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise InputError(f"unknown schedule kind {self.kind!r}")
        if self.lam < 0:
            raise InputError("lambda must be nonnegative")
        if self.energy_scale <= 0:
            raise InputError("energy_scale must be positive")
        if self.kind == "learnable":
            if self.f_params is None:
                raise InputError("learnable schedule needs f_params")
            if self.f_params.in_dim != 1 or self.f_params.out_dim != 1:
                raise InputError("learnable f must map a scalar time to a scalar")
        elif self.f_params is not None:
            raise InputError("f_params only apply to the learnable kind")

    @classmethod
    def learnable(cls, lam: float, rng: np.random.Generator,
                  hidden=(32, 32), energy_scale: float = 1.0) -> "Schedule":
        f = MlpParams.create([1, *hidden, 1], "tanh", rng)
        return cls(kind="learnable", lam=lam, energy_scale=energy_scale, f_params=f)

    @property
    def lam_eff(self) -> float:
        return self.lam / self.energy_scale


def _as_time(t) -> tuple[Array, bool]:
    arr = np.asarray(t, dtype=np.float64)
    scalar = arr.ndim == 0
    return (arr[None] if scalar else arr), scalar


def _f_values(params: MlpParams, t: Array) -> Array:
    col = t.reshape(-1, 1)
    return mlp_forward(params, col).reshape(t.shape)


def _f_and_deriv(params: MlpParams, t: Array) -> tuple[Array, Array]:
    """f(t) and exact df/dt via reverse mode through the schedule net."""
    col = t.reshape(-1, 1)
    tape = Tape()
    leaf = tape.leaf(col)
    out = mlp_forward(params, leaf, tape)
    grads = backward(tape, out)  # seed of ones: rows are independent
    return out.value.reshape(t.shape), grads.of(leaf).reshape(t.shape)


def schedule_eval(sched: Schedule, t):
    """(h(t), dh/dt) for the schedule kind; t in [0, 1) (max-seeking: strict)."""
    tv, scalar = _as_time(t)
    if np.any(tv < 0.0) or np.any(tv > 1.0):
        raise DomainError("schedule time must lie in [0, 1]")
    if sched.kind == "linear_t":
        h, dh = tv, np.ones_like(tv)
    elif sched.kind == "quadratic_t2":
        h, dh = tv * tv, 2.0 * tv
    elif sched.kind == "maxseek_t2_over_1mt":
        if np.any(tv >= 1.0):
            raise SingularityError("max-seeking schedule diverges at t=1")
        tc = np.minimum(tv, MAXSEEK_T_CAP)
        onemt = 1.0 - tc
        h = tc * tc / onemt
        dh = tc * (2.0 - tc) / (onemt * onemt)
    else:
        f, df = _f_and_deriv(sched.f_params, tv)
        h = tv + tv * (1.0 - tv) * f
        dh = 1.0 + (1.0 - 2.0 * tv) * f + tv * (1.0 - tv) * df
    if scalar:
        return float(h[0]), float(dh[0])
    return h, dh


def lambda_t(sched: Schedule, t):
    """(lam(t), dlam(t)) with the base strength rescaled by the energy scale."""
    h, dh = schedule_eval(sched, t)
    return sched.lam_eff * np.asarray(h), sched.lam_eff * np.asarray(dh)


def energy_scale_estimate(samples: Array, energy: EnergyFn) -> float:
    """Mean absolute energy over a dataset; normalizes schedule strength."""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise InputError("cannot estimate an energy scale from an empty dataset")
    return float(np.mean(np.abs(energy.value(samples))))


def _learnable_h(sched: Schedule, t: Array, with_deriv: bool) -> tuple[Array, Array | None]:
    if with_deriv:
        f, df = _f_and_deriv(sched.f_params, t)
        return t + t * (1.0 - t) * f, 1.0 + (1.0 - 2.0 * t) * f + t * (1.0 - t) * df
    f = _f_values(sched.f_params, t)
    return t + t * (1.0 - t) * f, None


def shift_coeff(sched: Schedule, t):
    """(1-t)^2 lam(t) in cancellation-free per-kind form; zero at both ends."""
    tv, scalar = _as_time(t)
    lam = sched.lam_eff
    onemt = 1.0 - tv
    if sched.kind == "linear_t":
        c = lam * tv * onemt * onemt
    elif sched.kind == "quadratic_t2":
        c = lam * tv * tv * onemt * onemt
    elif sched.kind == "maxseek_t2_over_1mt":
        c = lam * tv * tv * onemt
    else:
        h, _ = _learnable_h(sched, tv, with_deriv=False)
        c = lam * h * onemt * onemt
    return float(c[0]) if scalar else c


def grad_coeff(sched: Schedule, t):
    """(1-t)[lam(t) - (1-t) dlam(t)], simplified per kind."""
    tv, scalar = _as_time(t)
    lam = sched.lam_eff
    onemt = 1.0 - tv
    if sched.kind == "linear_t":
        c = lam * onemt * (2.0 * tv - 1.0)
    elif sched.kind == "quadratic_t2":
        c = lam * tv * onemt * (3.0 * tv - 2.0)
    elif sched.kind == "maxseek_t2_over_1mt":
        c = -2.0 * lam * tv * onemt
    else:
        h, dh = _learnable_h(sched, tv, with_deriv=True)
        c = onemt * lam * (h - onemt * dh)
    return float(c[0]) if scalar else c


def endpoint_vel_coeffs(sched: Schedule, t) -> tuple[Array, Array]:
    """(w_grad, w_hess) of the endpoint form of the guided velocity.

    With x_t built from (x1, noise, t) the target collapses to
        (x1 - noise) + w_grad * gradE(t*x1) - w_hess * hessE(t*x1) x1,
    where w_grad = (1-t)[2 lam(t) - (1-t) dlam(t)] and w_hess = (1-t)^2 lam(t).
    """
    tv, scalar = _as_time(t)
    lam = sched.lam_eff
    onemt = 1.0 - tv
    if sched.kind == "linear_t":
        w_g = lam * onemt * (3.0 * tv - 1.0)
    elif sched.kind == "quadratic_t2":
        w_g = 2.0 * lam * tv * onemt * (2.0 * tv - 1.0)
    elif sched.kind == "maxseek_t2_over_1mt":
        w_g = lam * tv * (3.0 * tv - 2.0)
    else:
        h, dh = _learnable_h(sched, tv, with_deriv=True)
        w_g = onemt * lam * (2.0 * h - onemt * dh)
    w_h = shift_coeff(sched, tv)
    if scalar:
        return float(w_g[0]), float(w_h)
    return w_g, w_h


def _coeff_col(c, like: Array) -> Array:
    c = np.asarray(c, dtype=like.dtype)
    if c.ndim == 0 or like.ndim == 1:
        return c
    return c.reshape(-1, 1)


def guided_mean(x1, t, energy: EnergyFn, sched: Schedule):
    """Shifted path mean t*x1 - (1-t)^2 lam(t) gradE(t*x1); t in [0, 1)."""
    tv = np.asarray(t)
    if np.any(tv < 0.0) or np.any(tv >= 1.0):
        raise DomainError("guided_mean needs t in [0, 1)")
    x1 = np.asarray(x1)
    tcol = _coeff_col(tv, x1)
    g = require_finite(np.asarray(energy.grad(tcol * x1)), "energy gradient")
    return tcol * x1 - _coeff_col(shift_coeff(sched, tv), x1) * g


def guided_sample(x1, noise, t, energy: EnergyFn, sched: Schedule):
    """Draw from the guided path: shifted mean plus (1-t)*noise; t in [0, 1].

    At t=1 the shift coefficient is an exact zero for every kind, so the
    sample equals x1; at t=0 it equals the noise (source preserved).
    """
    tv = np.asarray(t)
    if np.any(tv < 0.0) or np.any(tv > 1.0):
        raise DomainError("guided_sample needs t in [0, 1]")
    x1 = np.asarray(x1)
    noise = np.asarray(noise)
    tcol = _coeff_col(tv, x1)
    g = require_finite(np.asarray(energy.grad(tcol * x1)), "energy gradient")
    shift = _coeff_col(shift_coeff(sched, tv), x1)
    return tcol * x1 - shift * g + (1.0 - tcol) * noise


def energy_hvp(energy: EnergyFn, y, v):
    """Curvature term hessE(y) v used by the guided velocity."""
    out = np.asarray(energy.hvp(np.asarray(y), np.asarray(v)))
    return require_finite(out, "energy Hessian-vector product")


def guided_cond_velocity(x_t, x1, t, energy: EnergyFn, sched: Schedule):
    """Guided matching target; evaluates gradE and the HVP at y = t*x1."""
    tv = np.asarray(t)
    if np.any(tv >= 1.0):
        raise SingularityError("guided conditional velocity is undefined at t=1")
    if np.any(tv < 0.0):
        raise DomainError("guided_cond_velocity needs t in [0, 1)")
    x1 = np.asarray(x1)
    x_t = np.asarray(x_t)
    tcol = _coeff_col(tv, x1)
    y = tcol * x1
    g = require_finite(np.asarray(energy.grad(y)), "energy gradient")
    curv = energy_hvp(energy, y, x1)
    base = (x1 - x_t) / (1.0 - tcol)
    return (base + _coeff_col(grad_coeff(sched, tv), x1) * g
            - _coeff_col(shift_coeff(sched, tv), x1) * curv)


def _energy_terms(x1: Array, t: Array, energy: EnergyFn | None,
                  sched: Schedule) -> tuple[Array, Array]:
    """gradE(t*x1) and hessE(t*x1) x1 as x1-typed constants (zeros if no energy)."""
    if energy is None:
        if sched.lam != 0.0:
            raise InputError("an energy function is required when lambda > 0")
        return np.zeros_like(x1), np.zeros_like(x1)
    y = t * x1
    g = require_finite(np.asarray(energy.grad(y), dtype=x1.dtype),
                       "energy gradient")
    curv = require_finite(np.asarray(energy.hvp(y, x1), dtype=x1.dtype),
                          "energy Hessian-vector product")
    return g, curv


def egfm_targets(x1: Array, noise: Array, t: Array, energy: EnergyFn | None,
                 sched: Schedule) -> tuple[Array, Array]:
    """Guided sample and velocity target in the cancellation-free endpoint form."""
    g, curv = _energy_terms(x1, t, energy, sched)
    w_g, w_h = endpoint_vel_coeffs(sched, t.ravel())
    w_g = _coeff_col(w_g, x1)
    w_h = _coeff_col(w_h, x1)
    x_t = t * x1 + (1.0 - t) * noise - w_h * g
    target = (x1 - noise) + w_g * g - w_h * curv
    return x_t, target


def egfm_loss(model: FlowModel, x1: Array, energy: EnergyFn | None,
              sched: Schedule, rng: np.random.Generator | None = None,
              cond=None, draws: tuple[Array, Array] | None = None) -> float:
    """Mean squared error against the guided conditional velocity.

    With lam = 0 this is numerically identical to `cfm_loss` under shared
    (t, noise) draws.
    """
    x1 = np.asarray(x1)
    if x1.ndim != 2 or x1.shape[0] == 0:
        raise InputError("egfm_loss needs a nonempty (n, d) batch")
    if draws is None:
        if rng is None:
            raise InputError("egfm_loss needs an rng or explicit draws")
        draws = cfm_draws(rng, x1)
    t, noise = draws
    x_t, target = egfm_targets(x1, noise, t, energy, sched)
    pred = model.velocity(x_t, t, cond)
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


def _learnable_coeff_nodes(tape: Tape, sched: Schedule, t: Array):
    """On-tape (shift, w_grad, w_hess) so the loss trains f jointly.

    df/dt is taken by a central difference of f itself (two extra forward
    passes), which keeps the whole expression first-order differentiable
    in the schedule parameters.
    """
    lam = sched.lam_eff
    delta = LEARNABLE_FD_STEP
    onemt = (1.0 - t).astype(np.float32)
    f = mlp_forward(sched.f_params, t, tape)
    f_hi = mlp_forward(sched.f_params, np.clip(t + delta, 0.0, 1.0).astype(np.float32), tape)
    f_lo = mlp_forward(sched.f_params, np.clip(t - delta, 0.0, 1.0).astype(np.float32), tape)
    # Actual spacing after clipping keeps the quotient exact at the ends.
    spacing = (np.clip(t + delta, 0.0, 1.0) - np.clip(t - delta, 0.0, 1.0)).astype(np.float32)
    df = tape.mul(tape.sub(f_hi, f_lo), 1.0 / spacing)
    h = tape.add(t, tape.mul((t * onemt), f))
    dh = tape.add(1.0 + np.zeros_like(t),
                  tape.add(tape.mul((1.0 - 2.0 * t), f), tape.mul((t * onemt), df)))
    lam_h = tape.scale(h, lam)
    lam_dh = tape.scale(dh, lam)
    shift = tape.mul(onemt * onemt, lam_h)
    w_g = tape.mul(onemt, tape.sub(tape.scale(lam_h, 2.0), tape.mul(onemt, lam_dh)))
    return shift, w_g, shift


def egfm_loss_node(tape: Tape, model: FlowModel, x1: Array,
                   energy: EnergyFn | None, sched: Schedule,
                   draws: tuple[Array, Array], cond=None) -> Node:
    """Taped guided matching loss for training steps.

    The energy gradient and HVP enter as constants; for the learnable
    kind the schedule coefficients are nodes, so one backward pass yields
    gradients for both the flow model and the schedule net.
    """
    t, noise = draws
    g, curv = _energy_terms(x1, t, energy, sched)
    base_x = t * x1 + (1.0 - t) * noise
    base_target = x1 - noise
    if sched.kind != "learnable":
        w_g, w_h = endpoint_vel_coeffs(sched, t.ravel())
        w_g = _coeff_col(w_g, x1)
        w_h = _coeff_col(w_h, x1)
        x_t = base_x - w_h * g
        target = base_target + w_g * g - w_h * curv
        pred = model.velocity_node(tape, x_t, t, cond)
        diff = tape.sub(pred, target)
    else:
        shift, w_g, w_h = _learnable_coeff_nodes(tape, sched, t)
        x_t = tape.sub(base_x, tape.mul(shift, g))
        target = tape.sub(tape.add(base_target, tape.mul(w_g, g)),
                          tape.mul(w_h, curv))
        pred = model.velocity_node(tape, x_t, t, cond)
        diff = tape.sub(pred, target)
    return tape.mean(tape.sum(tape.square(diff), axis=-1))


def resolve_energy_scale(sched: Schedule, data: Array, energy: EnergyFn | None,
                         mode: str) -> Schedule:
    """Apply the dataset energy-scale normalizer according to `mode`.

    mode: "learnable_only" (default), "all", or "off".
    """
    if mode not in ("learnable_only", "all", "off"):
        raise InputError(f"unknown rescale mode {mode!r}")
    if energy is None or mode == "off":
        return sched
    if mode == "learnable_only" and sched.kind != "learnable":
        return sched
    scale = energy_scale_estimate(data, energy)
    if scale <= 0:
        scale = 1.0
    return Schedule(kind=sched.kind, lam=sched.lam, energy_scale=scale,
                    f_params=sched.f_params)


def fit_flow(model: FlowModel, data: Array, *, steps: int, batch_size: int,
             lr: float, streams, sched: Schedule | None = None,
             energy: EnergyFn | None = None, cond: Array | None = None,
             schedule_lr: float | None = None, grad_clip: float | None = None,
             log_interval: int = 100) -> list[dict]:
    """Train a flow model on samples, guided when a schedule is given.

    Returns metrics rows [{"step", "loss"}]; the step-0 row holds the
    pre-training loss on the first batch.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InputError("fit_flow needs a nonempty (n, d) dataset")
    n = data.shape[0]
    batch_rng = streams.get("train.batch")
    draw_rng = streams.get("train.flow")
    opt = AdamState.for_params(model.params.arrays(), lr=lr, grad_clip=grad_clip)
    sched_opt = None
    if sched is not None and sched.kind == "learnable":
        sched_opt = AdamState.for_params(sched.f_params.arrays(),
                                         lr=schedule_lr or lr, grad_clip=grad_clip)
    rows: list[dict] = []
    acc = 0.0
    count = 0
    for step in range(1, steps + 1):
        idx = batch_rng.integers(0, n, size=batch_size)
        x1 = data[idx]
        c = cond[idx] if cond is not None else None
        draws = cfm_draws(draw_rng, x1)
        tape = Tape()
        if sched is None:
            loss_node = cfm_loss_node(tape, model, x1, draws, cond=c)
        else:
            loss_node = egfm_loss_node(tape, model, x1, energy, sched, draws, cond=c)
        loss = float(loss_node.value)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        if step == 1:
            rows.append({"step": 0, "loss": loss})
        grads = backward(tape, loss_node)
        adam_step(model.params.arrays(), grads.mlp(model.params), opt)
        if sched_opt is not None:
            adam_step(sched.f_params.arrays(), grads.mlp(sched.f_params), sched_opt)
        acc += loss
        count += 1
        if step % log_interval == 0 or step == steps:
            rows.append({"step": step, "loss": acc / count})
            acc, count = 0.0, 0
    return rows
