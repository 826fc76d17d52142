"""Unguided flow matching: Gaussian/linear paths, the matching loss, and
the fixed-step Euler sampler.

The linear path interpolates x_t = t*x1 + (1-t)*x0 between a standard
normal draw at t=0 and a data point at t=1; its conditional velocity is
(x1 - x_t)/(1 - t) = x1 - x0. Training draws t uniformly on
[0, 1 - TIME_EPS] to stay clear of the 1/(1-t) singularity.
"""
from __future__ import annotations

import numpy as np

from .autodiff import MlpParams, Node, Tape, mlp_forward, require_finite
from .errors import DimensionError, DomainError, InputError, SingularityError

Array = np.ndarray

# Training never samples t inside (1 - TIME_EPS, 1]: the conditional
# velocity diverges there while the loss integrand stays integrable.
TIME_EPS = 1e-5


def _check_time(t, lo: float = 0.0, hi: float = 1.0, *, hi_open: bool = False):
    t = np.asarray(t)
    if np.any(t < lo) or (np.any(t >= hi) if hi_open else np.any(t > hi)):
        bound = f"[{lo}, {hi})" if hi_open else f"[{lo}, {hi}]"
        raise DomainError(f"time must lie in {bound}")
    return t


def linear_path_sample(x1, noise, t):
    """Point on the linear path: t*x1 + (1-t)*noise, for t in [0, 1]."""
    t = _check_time(t)
    return t * np.asarray(x1) + (1.0 - t) * np.asarray(noise)


def linear_cond_velocity(x_t, x1, t):
    """Target velocity (x1 - x_t)/(1-t) of the linear path; t=1 is singular."""
    t = np.asarray(t)
    if np.any(t >= 1.0):
        raise SingularityError("linear conditional velocity is undefined at t=1")
    _check_time(t, hi_open=True)
    return (np.asarray(x1) - np.asarray(x_t)) / (1.0 - t)


def gaussian_cond_velocity(x_t, alpha, dalpha, sigma, dsigma):
    """Velocity of a Gaussian path: dalpha + (dsigma/sigma)*(x_t - alpha)."""
    sigma = np.asarray(sigma)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be positive")
    return np.asarray(dalpha) + (np.asarray(dsigma) / sigma) * (
        np.asarray(x_t) - np.asarray(alpha))


def euler_integrate(field, x0, steps: int):
    """Integrate dx/dt = field(x, t) from t=0 to t=1 in `steps` uniform steps."""
    if steps < 1:
        raise InputError("euler_integrate needs at least one step")
    x = np.array(x0, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        u = np.asarray(field(x, k / steps))
        x = x + dt * u
        if not np.all(np.isfinite(x)):
            from .errors import NumericError

            raise NumericError(f"non-finite state at integration step {k}")
    return x


def sample_times(rng: np.random.Generator, n: int, dtype=np.float32) -> Array:
    """Training times t ~ U[0, 1 - TIME_EPS], one column per sample."""
    return ((1.0 - TIME_EPS) * rng.random(n)).astype(dtype)[:, None]


class FlowModel:
    """Parametric velocity field u(x, t[, cond]) as an MLP.

    Time enters as a raw scalar column appended to the input; optional
    sinusoidal features (`time_features` frequency pairs) can be enabled.
    A condition vector (e.g. the state for a policy) is appended last.
    """

    def __init__(self, dim: int, hidden=(64, 64), activation: str = "mish",
                 cond_dim: int = 0, time_features: int = 0,
                 rng: np.random.Generator | None = None,
                 params: MlpParams | None = None):
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.time_features = int(time_features)
        in_dim = self.dim + self.time_dim + self.cond_dim
        if params is not None:
            if params.in_dim != in_dim or params.out_dim != self.dim:
                raise DimensionError("params incompatible with model dimensions")
            self.params = params
        else:
            if rng is None:
                raise InputError("need an rng to initialize a FlowModel")
            self.params = MlpParams.create([in_dim, *hidden, self.dim],
                                           activation, rng)

    @property
    def time_dim(self) -> int:
        return 1 + 2 * self.time_features

    def time_columns(self, t, n: int) -> Array:
        t = np.asarray(t, dtype=np.float32)
        col = np.full((n, 1), float(t), dtype=np.float32) if t.ndim == 0 else t.reshape(n, 1)
        if self.time_features == 0:
            return col
        freqs = (2.0 ** np.arange(self.time_features)).astype(np.float32)
        ang = 2.0 * np.pi * col * freqs
        return np.concatenate([col, np.sin(ang), np.cos(ang)], axis=1)

    def _stack(self, x: Array, t, cond) -> tuple[Array, bool]:
        squeeze = x.ndim == 1
        xb = x[None, :] if squeeze else x
        parts = [xb.astype(np.float32, copy=False), self.time_columns(t, xb.shape[0])]
        if self.cond_dim:
            if cond is None:
                raise InputError("model is conditional but no condition given")
            cb = np.asarray(cond, dtype=np.float32)
            cb = np.broadcast_to(cb[None, :] if cb.ndim == 1 else cb,
                                 (xb.shape[0], self.cond_dim))
            parts.append(cb)
        return np.concatenate(parts, axis=1), squeeze

    def velocity(self, x, t, cond=None) -> Array:
        """Fast inference forward (no tape)."""
        inp, squeeze = self._stack(np.asarray(x), t, cond)
        out = mlp_forward(self.params, inp)
        return out[0] if squeeze else out

    def velocity_node(self, tape: Tape, x, t, cond=None) -> Node:
        """Taped forward; `x` may be a Node so gradients reach the input."""
        xv = x.value if isinstance(x, Node) else np.asarray(x)
        parts = [x, self.time_columns(t, xv.shape[0])]
        if self.cond_dim:
            if cond is None:
                raise InputError("model is conditional but no condition given")
            parts.append(np.asarray(cond, dtype=np.float32))
        return mlp_forward(self.params, tape.concat(parts), tape)

    def field(self, cond=None, params: MlpParams | None = None):
        """Velocity callable (x, t) -> u for `euler_integrate`."""
        use = self.params if params is None else params

        def f(x, t):
            inp, squeeze = self._stack(np.asarray(x), t, cond)
            out = mlp_forward(use, inp)
            return out[0] if squeeze else out

        return f


def cfm_draws(rng: np.random.Generator, x1: Array) -> tuple[Array, Array]:
    """Per-sample (t, noise) draws shared by the matching losses."""
    n, d = x1.shape
    t = sample_times(rng, n)
    noise = rng.standard_normal((n, d)).astype(np.float32)
    return t, noise


def cfm_loss(model: FlowModel, x1: Array, rng: np.random.Generator | None = None,
             cond=None, draws: tuple[Array, Array] | None = None) -> float:
    """Mean squared error against the linear-path conditional velocity."""
    x1 = np.asarray(x1)
    if x1.ndim != 2 or x1.shape[0] == 0:
        raise InputError("cfm_loss needs a nonempty (n, d) batch")
    if draws is None:
        if rng is None:
            raise InputError("cfm_loss needs an rng or explicit draws")
        draws = cfm_draws(rng, x1)
    t, noise = draws
    x_t = t * x1 + (1.0 - t) * noise
    target = x1 - noise
    pred = model.velocity(x_t, t, cond)
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


def cfm_loss_node(tape: Tape, model: FlowModel, x1: Array,
                  draws: tuple[Array, Array], cond=None) -> Node:
    """Taped version of `cfm_loss` for training steps."""
    t, noise = draws
    x_t = t * x1 + (1.0 - t) * noise
    target = x1 - noise
    pred = model.velocity_node(tape, x_t, t, cond)
    diff = tape.sub(pred, target)
    return tape.mean(tape.sum(tape.square(diff), axis=-1))


def generate(model: FlowModel, n: int, steps: int, rng: np.random.Generator,
             cond=None) -> Array:
    """Draw n samples by Euler-integrating the learned field from N(0, I)."""
    x0 = rng.standard_normal((n, model.dim)).astype(np.float32)
    x = euler_integrate(model.field(cond=cond), x0, steps)
    return require_finite(x, "generated samples")
