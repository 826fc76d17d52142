"""Ground-truth machinery: grid posteriors, divergences, return evaluation.

Everything here runs in float64 on 1-D or 2-D grids and serves as the
independent reference side of the acceptance checks; nothing in this
module shares code with the training path it judges.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import BanditSpec, PointMassSpec, pointmass_step
from .errors import CoverageError, DegenerateError, DomainError, InputError
from .rng import named_stream

Array = np.ndarray

MAX_GRID_DIM = 2


@dataclass(frozen=True)
class GridSpec:
    """Per-dimension (lo, hi, n_points) cell-center grid; at most 2-D."""

    axes: tuple[tuple[float, float, int], ...]

    def __post_init__(self):
        if not (1 <= len(self.axes) <= MAX_GRID_DIM):
            raise InputError(f"grids support 1..{MAX_GRID_DIM} dimensions")
        for lo, hi, n in self.axes:
            if lo >= hi:
                raise InputError("grid axis needs lo < hi")
            if n < 16:
                raise InputError("grid axis needs at least 16 points")

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(n for _, _, n in self.axes)

    def centers(self) -> list[Array]:
        out = []
        for lo, hi, n in self.axes:
            step = (hi - lo) / n
            out.append(lo + step * (np.arange(n) + 0.5))
        return out

    def edges(self) -> list[Array]:
        return [np.linspace(lo, hi, n + 1) for lo, hi, n in self.axes]

    @property
    def cell_volume(self) -> float:
        vol = 1.0
        for lo, hi, n in self.axes:
            vol *= (hi - lo) / n
        return vol

    def points(self) -> Array:
        """All cell centers, shape (prod(n), dim)."""
        centers = self.centers()
        if self.dim == 1:
            return centers[0][:, None]
        xx, yy = np.meshgrid(centers[0], centers[1], indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class DensityGrid:
    """Nonnegative values over a grid, normalized to unit mass."""

    spec: GridSpec
    values: Array  # flat, aligned with spec.points()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.shape[0] != int(np.prod(self.spec.shape)):
            raise InputError("values length does not match the grid")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise DegenerateError("density values must be finite and nonnegative")
        mass = float(self.values.sum() * self.spec.cell_volume)
        if mass <= 0:
            raise DegenerateError("density has zero total mass")
        self.values = self.values / mass

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.spec.cell_volume)

    def cell_probs(self) -> Array:
        p = self.values * self.spec.cell_volume
        return p / p.sum()

    def mean(self) -> Array:
        p = self.cell_probs()
        return self.spec.points().T @ p

    def var(self) -> Array:
        p = self.cell_probs()
        pts = self.spec.points()
        mu = pts.T @ p
        return ((pts - mu) ** 2).T @ p

    def sample(self, n: int, rng: np.random.Generator, jitter: bool = True) -> Array:
        """Categorical draw over cells, uniformly jittered inside each cell."""
        idx = rng.choice(self.values.shape[0], size=n, p=self.cell_probs())
        pts = self.spec.points()[idx]
        if jitter:
            widths = np.array([(hi - lo) / m for lo, hi, m in self.spec.axes])
            pts = pts + (rng.random((n, self.spec.dim)) - 0.5) * widths
        return pts

    def to_csv(self, path) -> None:
        pts = self.spec.points()
        header = ",".join(["x", "y"][: self.spec.dim] + ["density"])
        body = np.concatenate([pts, self.values[:, None]], axis=1)
        lines = [header] + [",".join(f"{v:.10g}" for v in row) for row in body]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def grid_posterior(density, energy, lam: float, grid: GridSpec) -> DensityGrid:
    """Tilted density p(x) * exp(-lam * E(x)) normalized by Riemann sum.

    `density` is a callable mapping (N, dim) points to nonnegative values.
    Computed in log space so large energies cannot overflow.
    """
    pts = grid.points()
    p = np.asarray(density(pts), dtype=np.float64).ravel()
    if p.shape[0] != pts.shape[0]:
        raise InputError("density callable returned the wrong number of values")
    if np.any(p < 0):
        raise DomainError("density must be nonnegative on the grid")
    if lam == 0.0:
        return DensityGrid(spec=grid, values=p)
    e = np.asarray(energy.value(pts), dtype=np.float64).ravel()
    with np.errstate(divide="ignore"):
        logv = np.log(p) - lam * e
    finite = np.isfinite(logv)
    if not np.any(finite):
        raise DegenerateError("tilted density vanished on the whole grid")
    vals = np.zeros_like(logv)
    vals[finite] = np.exp(logv[finite] - logv[finite].max())
    return DensityGrid(spec=grid, values=vals)


def kl_estimate(samples: Array, reference: DensityGrid) -> float:
    """KL(histogram(samples) || reference) with add-one Laplace smoothing.

    Samples outside the grid are dropped; at least 1000 must land inside.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != reference.spec.dim:
        raise InputError("sample dimension does not match the grid")
    edges = reference.spec.edges()
    inside = np.ones(samples.shape[0], dtype=bool)
    for d, (lo, hi, _) in enumerate(reference.spec.axes):
        inside &= (samples[:, d] >= lo) & (samples[:, d] <= hi)
    kept = samples[inside]
    if kept.shape[0] < 1000:
        raise CoverageError(
            f"only {kept.shape[0]} of {samples.shape[0]} samples in grid support")
    counts, _ = np.histogramdd(kept, bins=edges)
    counts = counts.ravel()
    p_hat = (counts + 1.0) / (counts.sum() + counts.size)
    q = reference.cell_probs()
    q = np.maximum(q, 1e-300)
    return float(np.sum(p_hat * np.log(p_hat / q)))


def wasserstein1d(samples_a: Array, samples_b: Array) -> float:
    """Empirical 1-D W1: mean absolute difference of matched quantiles."""
    a = np.asarray(samples_a, dtype=np.float64).ravel()
    b = np.asarray(samples_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InputError("wasserstein1d needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    m = max(a.size, b.size)
    q = (np.arange(m) + 0.5) / m
    return float(np.mean(np.abs(np.quantile(a, q) - np.quantile(b, q))))


def mode_mass(samples: Array, box: tuple) -> float:
    """Fraction of samples inside the axis-aligned box (inclusive)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise InputError("mode_mass needs nonempty samples")
    lo, hi = (np.asarray(box[0], dtype=np.float64),
              np.asarray(box[1], dtype=np.float64))
    inside = np.all((samples >= lo) & (samples <= hi), axis=1)
    return float(inside.mean())


class _NegRewardEnergy:
    """E(a) = -r(s, a) for a fixed bandit state."""

    def __init__(self, spec: BanditSpec, s: Array):
        self.spec = spec
        self.s = np.asarray(s, dtype=np.float64)

    def value(self, a: Array) -> Array:
        s = np.broadcast_to(self.s, np.asarray(a).shape[:-1] + self.s.shape)
        return -self.spec.reward_fn(s, a)


def bandit_policy_oracle(s: Array, spec: BanditSpec, lam: float,
                         grid: GridSpec) -> DensityGrid:
    """Exact tilted action posterior behavior(a|s) * exp(lam * r(s, a))."""
    if grid.dim != spec.action_dim:
        raise InputError("grid dimension != action dimension")
    return grid_posterior(lambda pts: spec.behavior_pdf(s, pts),
                          _NegRewardEnergy(spec, s), lam, grid)


def eval_policy_return(policy, env_spec, episodes: int, seed: int) -> tuple[float, float]:
    """Undiscounted return mean/sd over seeded rollouts.

    `policy` maps a batch of states (B, s_dim) to actions (B, a_dim).
    Bandit episodes are single pulls; point-mass episodes run the horizon
    in lock-step across episodes. The sd is the population sd.
    """
    if episodes < 1:
        raise InputError("need at least one episode")
    rng = named_stream(seed, "eval.rollout")
    if isinstance(env_spec, BanditSpec):
        s = rng.uniform(-1.0, 1.0, (episodes, env_spec.state_dim))
        a = np.clip(np.asarray(policy(s.astype(np.float32))), -1.0, 1.0)
        returns = env_spec.reward_fn(s, a)
    elif isinstance(env_spec, PointMassSpec):
        s = rng.uniform(env_spec.lo, env_spec.hi, (episodes, 2))
        returns = np.zeros(episodes)
        for _ in range(env_spec.horizon):
            a = np.clip(np.asarray(policy(s.astype(np.float32))), -1.0, 1.0)
            s, r, _ = pointmass_step(env_spec, s, a, rng)
            returns += r
    else:
        raise InputError(f"unsupported environment spec {type(env_spec).__name__}")
    return float(returns.mean()), float(returns.std())
