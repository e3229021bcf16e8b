"""Analytical two-cup pouring environment and exploration training.

A cylindrical cup is tilted to pour a goal mass of water; the tilt angle
follows from the closed-form relation between angle and the volume that
remains in the cup. Exploration allocates noisy mass measurements between
the task cup and a distractor cup via a Bernoulli policy, and the single
policy parameter is trained with plane-fit finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeding
from .optim import AdamConfig, AdamState, PlaneFitSpec, adam_step, plane_fit_gradient
from .seeding import substream

TILT_MARGIN = 1e-6
P_MIN, P_MAX = 0.01, 0.99


@dataclass(frozen=True)
class CupGeometry:
    radius: float = 3.1    # cm
    height: float = 10.5   # cm
    density: float = 1.0   # g/cm^3, water

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0 or self.density <= 0:
            raise ValueError("radius, height, density must be positive")

    @property
    def capacity(self) -> float:
        """Full-cup volume in cm^3."""
        return math.pi * self.radius**2 * self.height

    @property
    def max_tilt(self) -> float:
        """Validity bound of the tilt model: arctan(h / 2r)."""
        return math.atan(self.height / (2 * self.radius))


def tilt_angle(geom: CupGeometry, remaining_volume: float) -> float:
    """Tilt angle that leaves ``remaining_volume`` in the cup.

    phi = arctan((1/r)(h - V / (pi r^2))), clamped to
    [0, arctan(h/2r) - margin]; out-of-range volumes clamp rather than
    error.
    """
    phi = np.arctan(
        (geom.height - np.asarray(remaining_volume, dtype=float)
         / (math.pi * geom.radius**2)) / geom.radius
    )
    return np.clip(phi, 0.0, geom.max_tilt - TILT_MARGIN)


def volume_at_tilt(geom: CupGeometry, phi: float) -> float:
    """Volume retained at tilt ``phi``: pi r^2 (h - r tan(phi))."""
    return math.pi * geom.radius**2 * (geom.height - geom.radius * np.tan(phi))


@dataclass(frozen=True)
class PouringWorld:
    """True cup masses and environment noise. Cup 0 is the task cup."""

    masses: np.ndarray
    meas_noise_std: float = 30.0  # g, clipped at one sigma
    pour_noise_std: float = 5.0   # g, clipped at one sigma
    task_cup: int = 0

    def __post_init__(self):
        object.__setattr__(self, "masses", np.asarray(self.masses, dtype=float))
        if self.meas_noise_std < 0 or self.pour_noise_std < 0:
            raise ValueError("noise stds must be non-negative")
        if self.task_cup not in (0, 1):
            raise ValueError("task_cup must be 0 or 1")


@dataclass(frozen=True)
class PouringGoal:
    """Goal-mass distribution; per-episode samples are clipped to the range."""

    goal_mean: float = 50.0
    goal_std: float = 15.0
    clip_lo: float = 10.0
    clip_hi: float = 100.0


@dataclass(frozen=True)
class PouringExplorationPolicy:
    """Bernoulli probability of measuring the task cup after the first pass."""

    p_e: float
    horizon: int = 6

    def __post_init__(self):
        if not 0 <= self.p_e <= 1:
            raise ValueError("p_e must be in [0, 1]")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")


@dataclass(frozen=True)
class PourResult:
    tilt_angle: float
    poured: float
    cost: float


def _clipped_normal(rng: np.random.Generator, std: float, size=None) -> np.ndarray:
    draw = rng.normal(0.0, std, size=size)
    return np.clip(draw, -std, std)


def simulate_pour(
    geom: CupGeometry,
    world: PouringWorld,
    estimated_mass: float,
    goal_mass: float,
    rng: np.random.Generator | None = None,
    noiseless: bool = False,
) -> PourResult:
    """Pour using the angle planned from the estimated mass.

    The controller inverts the tilt model for a target remaining volume of
    (estimated - goal) / density; the environment pours according to the
    true mass at that angle plus clipped pour noise, floored at zero.
    """
    if estimated_mass < 0:
        raise ValueError("estimated_mass must be non-negative")
    rho = geom.density
    true_mass = world.masses[world.task_cup]
    phi = float(tilt_angle(geom, (estimated_mass - goal_mass) / rho))
    remaining = min(true_mass / rho, float(volume_at_tilt(geom, phi)))
    poured = true_mass - rho * remaining
    if not noiseless:
        if rng is None:
            raise ValueError("rng required for noisy pours")
        poured += float(_clipped_normal(rng, world.pour_noise_std))
    poured = max(poured, 0.0)
    return PourResult(tilt_angle=phi, poured=poured, cost=abs(goal_mass - poured))


def pouring_episode(
    policy: PouringExplorationPolicy,
    world: PouringWorld,
    geom: CupGeometry,
    goal: PouringGoal,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> tuple[float, np.ndarray]:
    """One exploration + pour episode; returns (cost, mass estimates).

    Measurement phase: one measurement per cup, then horizon - 2 Bernoulli
    allocations; each measurement is the true mass plus clipped noise and
    the per-cup estimate is the mean of its measurements. Task phase: a
    goal mass is sampled and poured from the task cup using its estimate.
    """
    t_e = policy.horizon
    alloc_u = rng.random(t_e - 2)
    meas_eps = (
        np.zeros(t_e) if noiseless else _clipped_normal(rng, world.meas_noise_std, t_e)
    )
    goal_mass = float(
        np.clip(rng.normal(goal.goal_mean, goal.goal_std), goal.clip_lo, goal.clip_hi)
    )
    task, other = world.task_cup, 1 - world.task_cup
    cups = np.empty(t_e, dtype=int)
    cups[0], cups[1] = task, other
    cups[2:] = np.where(alloc_u < policy.p_e, task, other)
    values = world.masses[cups] + meas_eps
    estimates = np.array(
        [values[cups == 0].mean(), values[cups == 1].mean()]
    )
    result = simulate_pour(
        geom, world, float(estimates[task]), goal_mass, rng, noiseless
    )
    return result.cost, estimates


@dataclass(frozen=True)
class PouringTrainConfig:
    adam: AdamConfig
    fd: PlaneFitSpec
    batch_size: int = 100
    n_batches: int = 2000
    horizon: int = 6
    p_init: float = 0.5
    mass_lo: float = 150.0
    mass_hi: float = 300.0
    meas_noise_std: float = 30.0
    pour_noise_std: float = 5.0
    eval_interval: int = 25

    @classmethod
    def defaults(cls, n_batches: int = 2000) -> "PouringTrainConfig":
        return cls(
            adam=AdamConfig(alpha=5e-3, weight_decay=0.0),
            fd=PlaneFitSpec(delta=0.05, lower=P_MIN, upper=P_MAX, n_samples=16),
            n_batches=n_batches,
        )


def _batch_losses(
    p_values: np.ndarray,
    objective: str,
    masses: np.ndarray,
    alloc_u: np.ndarray,
    meas_eps: np.ndarray,
    goals: np.ndarray,
    pour_eps: np.ndarray,
    geom: CupGeometry,
) -> np.ndarray:
    """Mean episode loss for each candidate p, vectorized over episodes.

    Noise arrays are fixed inputs (common random numbers across the
    finite-difference candidates). Shapes: masses (B, 2), alloc_u
    (B, T_e - 2), meas_eps (B, T_e), goals (B,), pour_eps (B,).
    """
    p_values = np.atleast_1d(np.asarray(p_values, dtype=float)).ravel()
    n_b, t_e = meas_eps.shape
    # Per-time-step cup indicator: 1 = task cup (index 0), first two steps
    # measure each cup once.
    is_task = np.empty((p_values.size, n_b, t_e), dtype=bool)
    is_task[:, :, 0] = True
    is_task[:, :, 1] = False
    is_task[:, :, 2:] = alloc_u[None] < p_values[:, None, None]
    meas = np.where(is_task, masses[:, 0, None], masses[:, 1, None]) + meas_eps[None]
    n_task = is_task.sum(axis=-1)
    m_task = (meas * is_task).sum(axis=-1) / n_task
    m_other = (meas * ~is_task).sum(axis=-1) / (t_e - n_task)
    if objective == "task_agnostic":
        return (
            ((m_task - masses[:, 0]) ** 2 + (m_other - masses[:, 1]) ** 2).mean(axis=-1)
        )
    # Task-oriented: pour with the task-cup estimate.
    phi = tilt_angle(geom, (m_task - goals[None]) / geom.density)
    remaining = np.minimum(
        masses[:, 0] / geom.density, volume_at_tilt(geom, phi)
    )
    poured = np.maximum(masses[:, 0] - geom.density * remaining + pour_eps[None], 0.0)
    return np.abs(goals[None] - poured).mean(axis=-1)


def evaluate_pouring_cost(
    p_e: float,
    cfg: PouringTrainConfig,
    seed: int,
    n_episodes: int = 10_000,
    geom: CupGeometry | None = None,
    goal: PouringGoal | None = None,
) -> float:
    """Mean task cost of a fixed allocation probability over fresh episodes."""
    geom = geom or CupGeometry()
    goal = goal or PouringGoal()
    rng = substream(seed, seeding.TAG_POUR_WORLDS, 10**6)
    masses = rng.uniform(cfg.mass_lo, cfg.mass_hi, size=(n_episodes, 2))
    alloc_u = rng.random((n_episodes, cfg.horizon - 2))
    meas_eps = _clipped_normal(rng, cfg.meas_noise_std, (n_episodes, cfg.horizon))
    goals = np.clip(
        rng.normal(goal.goal_mean, goal.goal_std, n_episodes),
        goal.clip_lo, goal.clip_hi,
    )
    pour_eps = _clipped_normal(rng, cfg.pour_noise_std, n_episodes)
    return float(
        _batch_losses(
            np.array([p_e]), "task_oriented", masses, alloc_u, meas_eps, goals,
            pour_eps, geom,
        )[0]
    )


@dataclass(frozen=True)
class PouringCurvePoint:
    batch: int
    loss: float
    p_e: float


@dataclass(frozen=True)
class PouringTrainResult:
    p_e: float
    curve: list[PouringCurvePoint]


def train_pouring(
    objective: str,
    cfg: PouringTrainConfig,
    seed: int,
    geom: CupGeometry | None = None,
    goal: PouringGoal | None = None,
    noiseless: bool = False,
) -> PouringTrainResult:
    """Train the Bernoulli allocation probability with FD gradients.

    Per step: sample a batch of worlds (cup masses uniform in the config
    range) and goals, estimate the loss gradient at the current p via plane
    fitting under common random numbers, take an Adam step, and clamp p to
    [0.01, 0.99].
    """
    if objective not in ("task_oriented", "task_agnostic"):
        raise ValueError(f"unknown objective {objective!r}")
    geom = geom or CupGeometry()
    goal = goal or PouringGoal()
    t_e = cfg.horizon
    params = np.array([cfg.p_init])
    adam_state = AdamState.zeros(1)
    curve: list[PouringCurvePoint] = []

    def step_noise(step: int, n_b: int):
        rng = substream(seed, seeding.TAG_POUR_NOISE, step)
        alloc_u = rng.random((n_b, t_e - 2))
        meas_eps = (
            np.zeros((n_b, t_e))
            if noiseless
            else _clipped_normal(rng, cfg.meas_noise_std, (n_b, t_e))
        )
        goals = np.clip(
            rng.normal(goal.goal_mean, goal.goal_std, n_b), goal.clip_lo, goal.clip_hi
        )
        pour_eps = (
            np.zeros(n_b)
            if noiseless
            else _clipped_normal(rng, cfg.pour_noise_std, n_b)
        )
        return alloc_u, meas_eps, goals, pour_eps

    def make_loss(step: int):
        masses = substream(seed, seeding.TAG_POUR_WORLDS, step).uniform(
            cfg.mass_lo, cfg.mass_hi, size=(cfg.batch_size, 2)
        )
        alloc_u, meas_eps, goals, pour_eps = step_noise(step, cfg.batch_size)

        def f_batch(rows: np.ndarray) -> np.ndarray:
            return _batch_losses(
                rows, objective, masses, alloc_u, meas_eps, goals, pour_eps, geom
            )

        return f_batch

    f0 = make_loss(0)
    curve.append(PouringCurvePoint(0, float(f0(params)[0]), float(params[0])))
    for step in range(cfg.n_batches):
        f_batch = make_loss(step)
        grad = plane_fit_gradient(
            lambda p: float(f_batch(p[None])[0]),
            params,
            cfg.fd,
            substream(seed, seeding.TAG_FD, step),
            f_batch=f_batch,
        ).gradient
        params, adam_state = adam_step(params, grad, adam_state, cfg.adam)
        params = np.clip(params, P_MIN, P_MAX)
        batch_no = step + 1
        if batch_no % cfg.eval_interval == 0 or batch_no == cfg.n_batches:
            curve.append(
                PouringCurvePoint(batch_no, float(f_batch(params)[0]), float(params[0]))
            )
    return PouringTrainResult(p_e=float(params[0]), curve=curve)
