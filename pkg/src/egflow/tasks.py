"""Named task fixtures shared by the CLI and the verification suite.

`gmm3` is the three-cluster 2-D mixture used for the guidance studies,
with three quadratic energies: `aligned` sits on the lower-left cluster
at the data curvature, `outside` is a unit-curvature bowl at (1, 1)
beyond the data, and `upper` is a unit-curvature bowl on the top cluster
(used for the mode-selection demonstration). `gauss1d` pairs a standard
normal with E(x) = x^2/2, whose tilt is Gaussian-conjugate. `bandit1d`
is a contextual bandit with Gaussian behavior and a quadratic reward, so
the tilted action posterior is a closed-form Gaussian. `pointmass` is
the multi-step control task.
"""
from __future__ import annotations

from .envs import BanditSpec, GmmSpec, PointMassSpec
from .errors import InputError
from .guidance import QuadraticEnergy
from .oracles import GridSpec

GMM3_SD = 0.08

GMM3 = GmmSpec(means=((-0.6, -0.6), (0.6, -0.4), (0.0, 0.7)),
               sd=GMM3_SD, weights=(1 / 3, 1 / 3, 1 / 3))

GAUSS1D = GmmSpec(means=((0.0,),), sd=1.0, weights=(1.0,))

BANDIT1D = BanditSpec(
    state_dim=1,
    action_dim=1,
    behavior=GmmSpec(means=((0.0,),), sd=0.25, weights=(1.0,)),
    reward="negdist_goal",
    goal=(0.5,),
    goal_state_coef=((0.2,),),
    reward_scale=4.0,
)

POINTMASS = PointMassSpec(goal=(0.6, 0.6), lo=-1.0, hi=1.0, max_action=0.25,
                          horizon=16, noise_sd=0.02)

# Upper-cluster box for the mode-selection check.
GMM3_UPPER_BOX = ((-0.3, 0.4), (0.3, 1.0))

SAMPLE_TASKS = ("gmm3", "gauss1d")
TRANSITION_TASKS = ("bandit1d", "pointmass")


def task_spec(name: str):
    specs = {"gmm3": GMM3, "gauss1d": GAUSS1D, "bandit1d": BANDIT1D,
             "pointmass": POINTMASS}
    if name not in specs:
        raise InputError(f"unknown task {name!r}; choose from {sorted(specs)}")
    return specs[name]


def task_energy(task: str, name: str):
    """Energy fixtures for the generative tasks; `none` disables guidance."""
    if name == "none":
        return None
    if task == "gmm3":
        energies = {
            "aligned": QuadraticEnergy(center=(-0.6, -0.6), scale=1.0 / GMM3_SD ** 2),
            "outside": QuadraticEnergy(center=(1.0, 1.0), scale=1.0),
            "upper": QuadraticEnergy(center=(0.0, 0.7), scale=1.0),
        }
    elif task == "gauss1d":
        energies = {"quad": QuadraticEnergy(center=(0.0,), scale=1.0)}
    else:
        raise InputError(f"task {task!r} has no named energies")
    if name not in energies:
        raise InputError(
            f"unknown energy {name!r} for task {task}; choose from {sorted(energies)}")
    return energies[name]


def task_grid(task: str, points_per_dim: int = 256) -> GridSpec:
    if task == "gmm3":
        return GridSpec(axes=((-1.5, 1.5, points_per_dim),
                              (-1.5, 1.5, points_per_dim)))
    if task == "gauss1d":
        return GridSpec(axes=((-5.0, 5.0, points_per_dim),))
    if task == "bandit1d":
        return GridSpec(axes=((-1.5, 1.5, points_per_dim),))
    raise InputError(f"task {task!r} has no oracle grid")
