"""Synthetic data generators and desk-scale environments.

Three task families stand in for large offline-RL benchmarks:

* a 2-D Gaussian mixture for generative/guidance studies,
* a single-step contextual bandit whose tilted posterior is computable
  exactly (Q*(s, a) = r(s, a) identically),
* a multi-step 2-D point-mass MDP with controllable behavior quality.

Every generator is a pure function of (spec, size, seed). Transition
datasets persist as an `.egd` directory: `manifest.json` plus `data.bin`
holding little-endian float32 arrays concatenated in field order
(s, a, r, s', done).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, InputError
from .rng import named_stream

Array = np.ndarray

DATASET_FORMAT = "egflow-dataset-v1"
_FIELD_ORDER = ("s", "a", "r", "s2", "done")


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture with shared standard deviation."""

    means: tuple[tuple[float, ...], ...]
    sd: float
    weights: tuple[float, ...]

    def __post_init__(self):
        if self.sd <= 0:
            raise InputError("mixture sd must be positive")
        if len(self.means) != len(self.weights) or not self.means:
            raise InputError("means and weights must pair up")
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
            raise InputError("weights must be nonnegative and sum to 1")
        dims = {len(m) for m in self.means}
        if len(dims) != 1:
            raise InputError("all component means need the same dimension")

    @property
    def dim(self) -> int:
        return len(self.means[0])

    def mean_array(self) -> Array:
        return np.asarray(self.means, dtype=np.float64)

    def sample(self, n: int, rng: np.random.Generator) -> Array:
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        x = self.mean_array()[comp] + self.sd * rng.standard_normal((n, self.dim))
        return x.astype(np.float32)

    def pdf(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        mu = self.mean_array()
        d = self.dim
        norm = (2.0 * np.pi * self.sd ** 2) ** (-d / 2.0)
        sq = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
        comp = norm * np.exp(-0.5 * sq / self.sd ** 2)
        return comp @ np.asarray(self.weights)


def gen_gmm_dataset(spec: GmmSpec, n: int, seed: int) -> Array:
    """n i.i.d. mixture draws; deterministic per seed."""
    if n < 1:
        raise InputError("need n >= 1 samples")
    return spec.sample(n, named_stream(seed, "data.gmm"))


@dataclass(frozen=True)
class BanditSpec:
    """Single-step contextual bandit; states uniform on [-1, 1]^state_dim.

    The behavior policy is a GMM over actions whose component means may
    shift linearly with the state. Rewards are quadratic bowls around a
    (state-dependent) goal, so Q*(s, a) = r(s, a) and the exponentially
    tilted posterior stays in closed form for Gaussian behavior.
    """

    state_dim: int
    behavior: GmmSpec
    action_dim: int = 2
    reward: str = "negdist_goal"
    goal: tuple[float, ...] = ()
    goal_state_coef: tuple[tuple[float, ...], ...] = ()
    reward_scale: float = 1.0
    goals: tuple[tuple[float, ...], ...] = ()
    goal_heights: tuple[float, ...] = ()
    behavior_state_coef: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise InputError("state/action dims must be positive")
        if self.behavior.dim != self.action_dim:
            raise InputError("behavior mixture dimension != action_dim")
        if self.reward == "negdist_goal":
            if len(self.goal) != self.action_dim:
                raise InputError("negdist_goal needs a goal of action_dim")
        elif self.reward == "bimodal":
            if len(self.goals) != 2 or len(self.goal_heights) != 2:
                raise InputError("bimodal reward needs two goals and heights")
            if any(len(g) != self.action_dim for g in self.goals):
                raise InputError("bimodal goals must have action_dim entries")
        else:
            raise InputError(f"unknown reward id {self.reward!r}")
        for name, mat in (("goal_state_coef", self.goal_state_coef),
                          ("behavior_state_coef", self.behavior_state_coef)):
            if mat and (len(mat) != self.action_dim
                        or any(len(row) != self.state_dim for row in mat)):
                raise InputError(f"{name} must be action_dim x state_dim")

    def _coef(self, rows) -> Array | None:
        if not rows:
            return None
        return np.asarray(rows, dtype=np.float64)

    def goal_at(self, s: Array) -> Array:
        """Reward bowl center, shape (..., action_dim)."""
        g = np.asarray(self.goal, dtype=np.float64)
        coef = self._coef(self.goal_state_coef)
        if coef is None:
            return np.broadcast_to(g, np.asarray(s).shape[:-1] + (self.action_dim,))
        return g + np.asarray(s, dtype=np.float64) @ coef.T

    def behavior_shift(self, s: Array) -> Array:
        coef = self._coef(self.behavior_state_coef)
        if coef is None:
            return np.zeros(np.asarray(s).shape[:-1] + (self.action_dim,))
        return np.asarray(s, dtype=np.float64) @ coef.T

    def reward_fn(self, s: Array, a: Array) -> Array:
        a = np.asarray(a, dtype=np.float64)
        if self.reward == "negdist_goal":
            dev = a - self.goal_at(s)
            return -0.5 * self.reward_scale * np.sum(dev * dev, axis=-1)
        bumps = []
        for g, height in zip(self.goals, self.goal_heights):
            dev = a - np.asarray(g, dtype=np.float64)
            bumps.append(height - 0.5 * self.reward_scale * np.sum(dev * dev, axis=-1))
        return np.maximum(bumps[0], bumps[1])

    def sample_behavior(self, s: Array, rng: np.random.Generator) -> Array:
        base = self.behavior.sample(np.asarray(s).shape[0], rng)
        a = base + self.behavior_shift(s).astype(np.float32)
        return np.clip(a, -1.0, 1.0)

    def behavior_pdf(self, s: Array, actions: Array) -> Array:
        """Behavior action density at one state, evaluated on action points."""
        shift = self.behavior_shift(np.asarray(s)[None, :])[0]
        return self.behavior.pdf(np.asarray(actions, dtype=np.float64) - shift)


@dataclass(frozen=True)
class PointMassSpec:
    """2-D point mass: s' = clip(s + a + noise), reward -|s' - goal|.

    Actions are clamped to max_action per axis before stepping; episodes
    run a fixed horizon.
    """

    goal: tuple[float, float] = (0.6, 0.6)
    lo: float = -1.0
    hi: float = 1.0
    max_action: float = 0.25
    horizon: int = 16
    noise_sd: float = 0.02

    def __post_init__(self):
        if self.horizon < 1:
            raise InputError("horizon must be >= 1")
        if not (self.lo < self.hi):
            raise InputError("need lo < hi")
        if self.max_action <= 0 or self.noise_sd < 0:
            raise InputError("bad action bound or noise sd")

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 2


def pointmass_step(spec: PointMassSpec, s: Array, a: Array,
                   rng: np.random.Generator | None):
    """One transition; `done` is always False (the caller tracks the horizon)."""
    s = np.asarray(s, dtype=np.float64)
    a = np.clip(np.asarray(a, dtype=np.float64), -spec.max_action, spec.max_action)
    noise = 0.0
    if rng is not None and spec.noise_sd > 0:
        noise = spec.noise_sd * rng.standard_normal(s.shape)
    s2 = np.clip(s + a + noise, spec.lo, spec.hi)
    r = -np.linalg.norm(s2 - np.asarray(spec.goal), axis=-1)
    return s2, r, False


def _greedy_action(spec: PointMassSpec, s: Array) -> Array:
    pull = 0.9 * (np.asarray(spec.goal) - np.asarray(s))
    return np.clip(pull, -spec.max_action, spec.max_action)


def _behavior_actions(spec: PointMassSpec, s: Array, quality: Array,
                      rng: np.random.Generator) -> Array:
    """quality: bool rows, True = noisy-greedy, False = uniform random."""
    n = s.shape[0]
    a_rand = rng.uniform(-spec.max_action, spec.max_action, (n, 2))
    a_greedy = _greedy_action(spec, s) + 0.3 * spec.max_action * rng.standard_normal((n, 2))
    a_greedy = np.clip(a_greedy, -spec.max_action, spec.max_action)
    return np.where(quality[:, None], a_greedy, a_rand)


BEHAVIOR_QUALITIES = ("random", "medium", "mixed")


def gen_pointmass_dataset(spec: PointMassSpec, n_episodes: int,
                          behavior_quality: str, seed: int) -> "OfflineDataset":
    """Behavior rollouts flattened to transitions; done flags horizon ends."""
    if n_episodes < 1:
        raise InputError("need at least one episode")
    if behavior_quality not in BEHAVIOR_QUALITIES:
        raise InputError(f"unknown behavior quality {behavior_quality!r}")
    rng = named_stream(seed, "data.pointmass")
    n, h = n_episodes, spec.horizon
    if behavior_quality == "random":
        greedy = np.zeros(n, dtype=bool)
    elif behavior_quality == "medium":
        greedy = np.ones(n, dtype=bool)
    else:
        greedy = rng.random(n) < 0.5
    s = rng.uniform(spec.lo, spec.hi, (n, 2))
    ss, aa, rr, s2s, dd = [], [], [], [], []
    for k in range(h):
        a = _behavior_actions(spec, s, greedy, rng)
        s2, r, _ = pointmass_step(spec, s, a, rng)
        ss.append(s)
        aa.append(a)
        rr.append(r)
        s2s.append(s2)
        dd.append(np.full(n, 1.0 if k == h - 1 else 0.0))
        s = s2
    stack = lambda parts: np.concatenate(parts, axis=0).astype(np.float32)
    meta = {"task": "pointmass", "spec": spec_to_dict(spec), "seed": int(seed),
            "behavior_quality": behavior_quality, "n_episodes": int(n_episodes)}
    return OfflineDataset(s=stack(ss), a=stack(aa), r=stack(rr), s2=stack(s2s),
                          done=stack(dd), meta=meta)


def gen_bandit_dataset(spec: BanditSpec, n: int, seed: int) -> "OfflineDataset":
    """Uniform states, behavior-mixture actions, exact rewards, done=1."""
    if n < 1:
        raise InputError("need n >= 1 transitions")
    rng = named_stream(seed, "data.bandit")
    s = rng.uniform(-1.0, 1.0, (n, spec.state_dim))
    a = spec.sample_behavior(s, rng)
    r = spec.reward_fn(s, a)
    meta = {"task": "bandit", "spec": spec_to_dict(spec), "seed": int(seed)}
    return OfflineDataset(s=s.astype(np.float32), a=np.asarray(a, dtype=np.float32),
                          r=r.astype(np.float32), s2=s.astype(np.float32),
                          done=np.ones(n, dtype=np.float32), meta=meta)


# -- dataset container and .egd persistence ----------------------------------


@dataclass
class OfflineDataset:
    """Flat transition store (s, a, r, s', done) in float32 arrays."""

    s: Array
    a: Array
    r: Array
    s2: Array
    done: Array
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.ascontiguousarray(self.s, dtype=np.float32)
        self.a = np.ascontiguousarray(self.a, dtype=np.float32)
        self.r = np.ascontiguousarray(self.r, dtype=np.float32).reshape(-1)
        self.s2 = np.ascontiguousarray(self.s2, dtype=np.float32)
        self.done = np.ascontiguousarray(self.done, dtype=np.float32).reshape(-1)
        n = self.s.shape[0]
        if self.s.ndim != 2 or self.a.ndim != 2 or self.s2.shape != self.s.shape:
            raise InputError("state/action arrays must be 2-D and consistent")
        if not (self.a.shape[0] == self.r.shape[0] == self.done.shape[0] == n):
            raise InputError("all dataset arrays must share one length")
        if n == 0:
            raise InputError("dataset is empty")
        if not np.all(np.isfinite(self.r)):
            raise InputError("rewards must be finite")

    @property
    def n(self) -> int:
        return self.s.shape[0]

    @property
    def s_dim(self) -> int:
        return self.s.shape[1]

    @property
    def a_dim(self) -> int:
        return self.a.shape[1]

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.n, size=batch_size)
        return (self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])

    def standardized_rewards(self) -> tuple["OfflineDataset", float, float]:
        """Copy with rewards scaled to mean 0, sd 1."""
        mean = float(self.r.mean())
        sd = float(self.r.std())
        if sd <= 0:
            raise InputError("cannot standardize constant rewards")
        r = ((self.r - mean) / sd).astype(np.float32)
        return (OfflineDataset(s=self.s.copy(), a=self.a.copy(), r=r,
                               s2=self.s2.copy(), done=self.done.copy(),
                               meta=dict(self.meta)), mean, sd)

    def save(self, path) -> None:
        """Write the `.egd` directory (manifest.json + data.bin)."""
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        blobs = [np.ascontiguousarray(getattr(self, name), dtype="<f4").tobytes()
                 for name in _FIELD_ORDER]
        payload = b"".join(blobs)
        manifest = {
            "format": DATASET_FORMAT,
            "n": self.n,
            "s_dim": self.s_dim,
            "a_dim": self.a_dim,
            "field_order": list(_FIELD_ORDER),
            "payload_bytes": len(payload),
            "spec_hash": spec_hash(self.meta.get("spec", {})),
            **self.meta,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (out / "data.bin").write_bytes(payload)

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        root = Path(path)
        mpath, dpath = root / "manifest.json", root / "data.bin"
        if not mpath.exists() or not dpath.exists():
            raise InputError(f"{root} is not an .egd dataset directory")
        manifest = json.loads(mpath.read_text())
        if manifest.get("format") != DATASET_FORMAT:
            raise CorruptionError("unrecognized dataset format")
        n, sd, ad = manifest["n"], manifest["s_dim"], manifest["a_dim"]
        raw = dpath.read_bytes()
        expected = 4 * n * (2 * sd + ad + 2)
        if len(raw) != expected or manifest.get("payload_bytes") != expected:
            raise CorruptionError(
                f"payload is {len(raw)} bytes, manifest implies {expected}")
        flat = np.frombuffer(raw, dtype="<f4")
        sizes = {"s": n * sd, "a": n * ad, "r": n, "s2": n * sd, "done": n}
        arrays = {}
        pos = 0
        for name in _FIELD_ORDER:
            arrays[name] = flat[pos:pos + sizes[name]].copy()
            pos += sizes[name]
        meta = {k: v for k, v in manifest.items()
                if k not in ("format", "n", "s_dim", "a_dim", "field_order",
                             "payload_bytes", "spec_hash")}
        return cls(s=arrays["s"].reshape(n, sd), a=arrays["a"].reshape(n, ad),
                   r=arrays["r"], s2=arrays["s2"].reshape(n, sd),
                   done=arrays["done"], meta=meta)


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    if isinstance(spec, BanditSpec):
        d["behavior"] = asdict(spec.behavior)
    return d


def spec_from_dict(task: str, d: dict):
    if task == "bandit":
        behavior = GmmSpec(means=tuple(tuple(m) for m in d["behavior"]["means"]),
                           sd=d["behavior"]["sd"],
                           weights=tuple(d["behavior"]["weights"]))
        kwargs = {k: v for k, v in d.items() if k != "behavior"}
        for key in ("goal", "goal_heights"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        for key in ("goal_state_coef", "behavior_state_coef", "goals"):
            if key in kwargs:
                kwargs[key] = tuple(tuple(row) for row in kwargs[key])
        return BanditSpec(behavior=behavior, **kwargs)
    if task == "pointmass":
        d = dict(d)
        d["goal"] = tuple(d["goal"])
        return PointMassSpec(**d)
    if task == "gmm":
        return GmmSpec(means=tuple(tuple(m) for m in d["means"]), sd=d["sd"],
                       weights=tuple(d["weights"]))
    raise InputError(f"unknown task kind {task!r}")


def spec_hash(spec_dict: dict) -> str:
    blob = json.dumps(spec_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_samples(path, x: Array, meta: dict) -> None:
    """Persist a plain sample matrix (generative tasks) in the .egd idiom."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    x = np.ascontiguousarray(x, dtype="<f4")
    manifest = {"format": DATASET_FORMAT, "kind": "samples", "n": int(x.shape[0]),
                "dim": int(x.shape[1]), "payload_bytes": x.nbytes,
                "spec_hash": spec_hash(meta.get("spec", {})), **meta}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "data.bin").write_bytes(x.tobytes())


def load_samples(path) -> tuple[Array, dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("kind") != "samples":
        raise InputError(f"{root} does not hold a sample matrix")
    n, dim = manifest["n"], manifest["dim"]
    raw = (root / "data.bin").read_bytes()
    if len(raw) != 4 * n * dim:
        raise CorruptionError("sample payload does not match manifest")
    x = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    return x, manifest
