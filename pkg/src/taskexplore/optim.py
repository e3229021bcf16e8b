"""Generic optimizers shared by the training loops.

Adam with decoupled weight decay, episodic relative-entropy policy search
(REPS), and plane-fitting finite-difference gradient estimation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

ETA_MIN = 1e-6
ETA_MAX = 1e6

# Weighted covariances of few samples can be rank deficient; this keeps the
# search distribution positive definite.
COV_JITTER = 1e-9


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("beta1/beta2 must be in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), t=0)


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    cfg: AdamConfig,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.

    Weight decay is decoupled: the term ``-alpha * weight_decay * params``
    is added to the parameters directly and never enters the moment
    estimates.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError(
            f"dimension mismatch: params {params.shape}, grad {grad.shape}, "
            f"moments {state.m.shape}"
        )
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad**2
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    new_params = (
        params
        - cfg.alpha * m_hat / (np.sqrt(v_hat) + cfg.eps)
        - cfg.alpha * cfg.weight_decay * params
    )
    return new_params, AdamState(m=m, v=v, t=t)


@dataclass(frozen=True)
class PlaneFitSpec:
    """Sampling spec for finite differences via plane fitting.

    ``delta`` is the standard deviation of the Gaussian perturbations;
    ``lower``/``upper`` bound the absolute sample locations.
    """

    delta: float
    lower: float | np.ndarray
    upper: float | np.ndarray
    n_samples: int

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("lower must be <= upper componentwise")


@dataclass(frozen=True)
class PlaneFitResult:
    gradient: np.ndarray
    degenerate: bool


def plane_fit_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    spec: PlaneFitSpec,
    rng: np.random.Generator,
    f_batch: Callable[[np.ndarray], np.ndarray] | None = None,
) -> PlaneFitResult:
    """Gradient estimate by least-squares regression on clipped perturbations.

    Draws ``n_samples`` points ``X_n = x + clip(N(0, delta^2), l - x, u - x)``
    (so the absolute samples stay inside ``[l, u]``), evaluates the
    objective, centers both sides, and regresses via the pseudo-inverse.

    ``f_batch``, if given, evaluates all sample rows at once and must agree
    with ``f`` row by row; it exists so callers can vectorize expensive
    objectives.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dim = x.size
    if spec.n_samples < dim + 1:
        raise ValueError(f"n_samples={spec.n_samples} < dim+1={dim + 1}")
    lower = np.broadcast_to(np.asarray(spec.lower, dtype=float), x.shape)
    upper = np.broadcast_to(np.asarray(spec.upper, dtype=float), x.shape)
    perturb = rng.normal(0.0, spec.delta, size=(spec.n_samples, dim))
    perturb = np.clip(perturb, lower - x, upper - x)
    samples = x + perturb
    if f_batch is not None:
        values = np.asarray(f_batch(samples), dtype=float)
    else:
        values = np.array([f(s) for s in samples], dtype=float)
    x_centered = samples - samples.mean(axis=0)
    f_centered = values - values.mean()
    degenerate = not np.any(x_centered)
    gradient = np.linalg.pinv(x_centered) @ f_centered
    return PlaneFitResult(gradient=gradient, degenerate=degenerate)


@dataclass(frozen=True)
class RepsState:
    """Gaussian search distribution with a KL step-size bound."""

    mu_z: np.ndarray
    sigma_z: np.ndarray
    eps_kl: float = 1.0

    def __post_init__(self):
        if not self.eps_kl > 0:
            raise ValueError("eps_kl must be positive")


def reps_solve_temperature(rewards: np.ndarray, eps_kl: float) -> float:
    """Temperature from the KL constraint via the dual objective.

    Minimizes ``eta * eps + eta * log mean(exp(R_n / eta))`` over
    ``eta in [ETA_MIN, ETA_MAX]`` (bracketed minimization in log space).
    Rewards are shifted by their max before exponentiation; the resulting
    weights are invariant to that shift.
    """
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise ValueError("need at least one reward")
    if not eps_kl > 0:
        raise ValueError("eps_kl must be positive")
    shifted = rewards - rewards.max()
    if np.ptp(shifted) <= 1e-14 * max(1.0, np.abs(rewards).max()):
        # Equal rewards: dual is eta*eps + const, minimized at the lower
        # bound; any eta gives uniform weights.
        return ETA_MIN

    def dual(log_eta: float) -> float:
        eta = np.exp(log_eta)
        return eta * eps_kl + eta * np.log(np.mean(np.exp(shifted / eta)))

    res = minimize_scalar(
        dual,
        bounds=(np.log(ETA_MIN), np.log(ETA_MAX)),
        method="bounded",
        options={"xatol": 1e-12},
    )
    return float(np.exp(res.x))


def reps_weights(rewards: np.ndarray, eta: float) -> np.ndarray:
    """Unnormalized sample weights ``d_n = exp(R_n / eta)``, shift-stabilized."""
    rewards = np.asarray(rewards, dtype=float)
    return np.exp((rewards - rewards.max()) / eta)


def reps_update(
    state: RepsState,
    samples: np.ndarray,
    rewards: np.ndarray,
) -> tuple[RepsState, bool]:
    """One episodic REPS update of the search distribution.

    Returns the new state and a stall flag; on stall (weight mass below the
    numeric floor) the previous state is kept.
    """
    samples = np.asarray(samples, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    if samples.ndim != 2 or samples.shape[0] != rewards.shape[0]:
        raise ValueError("samples and rewards must have matching length")
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    eta = reps_solve_temperature(rewards, state.eps_kl)
    d = reps_weights(rewards, eta)
    total = d.sum()
    if not np.isfinite(total) or total < 1e-300:
        return state, True
    mu = d @ samples / total
    diff = samples - mu
    sigma = np.einsum("n,ni,nj->ij", d, diff, diff) / total
    sigma = 0.5 * (sigma + sigma.T) + COV_JITTER * np.eye(samples.shape[1])
    return RepsState(mu_z=mu, sigma_z=sigma, eps_kl=state.eps_kl), False
