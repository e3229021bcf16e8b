"""Eigen-decomposed linear dynamical systems and noisy rollouts.

The dynamics matrix is ``A = U diag(theta) U^T`` with a fixed known
orthonormal basis ``U``; only the eigenvalues ``theta`` are unknown and
sampled from a capped Gaussian distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ORTHONORMAL_TOL = 1e-10

# States with any component beyond this are treated as diverged; the rollout
# freezes there so downstream costs stay finite.
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class ThetaDistribution:
    """Capped Gaussian over eigenvalues."""

    mean: np.ndarray
    std: float = 0.2
    cap: float = 1.1

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if not self.cap > 0:
            raise ValueError("cap must be positive")

    @property
    def dim(self) -> int:
        return self.mean.size


def sample_theta(dist: ThetaDistribution, rng: np.random.Generator) -> np.ndarray:
    """Draw eigenvalues componentwise and clamp to [-cap, +cap]."""
    raw = rng.normal(dist.mean, dist.std)
    return np.clip(raw, -dist.cap, dist.cap)


def sample_theta_set(
    dist: ThetaDistribution, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Stack of ``n`` independent eigenvalue draws, shape (n, dim)."""
    raw = rng.normal(dist.mean, dist.std, size=(n, dist.dim))
    return np.clip(raw, -dist.cap, dist.cap)


def _check_orthonormal(basis_u: np.ndarray) -> None:
    err = np.abs(basis_u.T @ basis_u - np.eye(basis_u.shape[1])).max()
    if err > ORTHONORMAL_TOL:
        raise ValueError(f"basis is not orthonormal (max deviation {err:.2e})")


def assemble_dynamics(basis_u: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``A = U diag(theta) U^T``."""
    basis_u = np.asarray(basis_u, dtype=float)
    theta = np.asarray(theta, dtype=float)
    _check_orthonormal(basis_u)
    return (basis_u * theta) @ basis_u.T


def random_orthonormal_basis(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormalize a random Gaussian matrix (sign-fixed QR)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def random_input_matrix(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Input matrix with i.i.d. N(0, 1/n) entries, held fixed and known."""
    return rng.standard_normal((n, m)) / np.sqrt(n)


@dataclass(frozen=True)
class LinearSystem:
    basis_u: np.ndarray
    theta: np.ndarray
    input_b: np.ndarray
    obs_noise_std: float = 0.0
    dyn_noise_std: float = 0.0
    a_matrix: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.obs_noise_std < 0 or self.dyn_noise_std < 0:
            raise ValueError("noise stds must be non-negative")
        object.__setattr__(self, "a_matrix", assemble_dynamics(self.basis_u, self.theta))

    @property
    def state_dim(self) -> int:
        return self.input_b.shape[0]

    @property
    def action_dim(self) -> int:
        return self.input_b.shape[1]


@dataclass(frozen=True)
class Trajectory:
    """States x_{1:T}, observations o_{0:T}, and the T applied actions."""

    x0: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    diverged: bool = False

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


def draw_rollout_noise(
    rng: np.random.Generator | None,
    horizon: int,
    dim: int,
    obs_noise_std: float,
    dyn_noise_std: float,
    noiseless: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Observation noise (horizon+1, dim) and dynamics noise (horizon, dim).

    The observation block is always drawn before the dynamics block so that
    batched evaluators can reproduce rollouts stream-for-stream.
    """
    if noiseless:
        return np.zeros((horizon + 1, dim)), np.zeros((horizon, dim))
    if rng is None:
        raise ValueError("rng required for noisy rollouts")
    v = rng.standard_normal((horizon + 1, dim)) * obs_noise_std
    w = rng.standard_normal((horizon, dim)) * dyn_noise_std
    return v, w


def rollout(
    system: LinearSystem,
    controller: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    horizon: int,
    rng: np.random.Generator | None = None,
    noiseless: bool = False,
) -> Trajectory:
    """Simulate ``x_{t+1} = A x_t + B u_t + w_t`` with ``o_t = x_t + v_t``.

    The controller receives the true state. If a state overflows (non-finite
    or beyond DIVERGENCE_LIMIT) the rollout freezes at the truncation-time
    state with zero actions for the remaining steps and sets the divergence
    flag; cost functions applied to the frozen trajectory therefore charge
    the truncation-time state for every remaining step.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    n = system.state_dim
    v, w = draw_rollout_noise(
        rng, horizon, n, system.obs_noise_std, system.dyn_noise_std, noiseless
    )
    a, b = system.a_matrix, system.input_b
    states = np.empty((horizon, n))
    actions = np.empty((horizon, system.action_dim))
    observations = np.empty((horizon + 1, n))
    observations[0] = x0 + v[0]
    x = x0
    diverged = False
    for t in range(horizon):
        if diverged:
            u = np.zeros(system.action_dim)
            x_next = x
        else:
            u = np.asarray(controller(x), dtype=float)
            x_next = a @ x + b @ u + w[t]
            if not np.all(np.isfinite(x_next)):
                diverged = True
                x_next = x
            elif np.abs(x_next).max() > DIVERGENCE_LIMIT:
                diverged = True
        actions[t] = u
        states[t] = x_next
        observations[t + 1] = x_next + v[t + 1]
        x = x_next
    return Trajectory(
        x0=x0, states=states, observations=observations, actions=actions,
        diverged=diverged,
    )
