"""Finite-horizon LQR planning, quadratic cost, and closed-form sys-id.

The task policy is the time-varying feedback law from the backward Riccati
recursion; the simulation optimizer recovers the dynamics eigenvalues by
exact per-eigencoordinate least squares on an observed trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linear_system import Trajectory, _check_orthonormal


def _check_psd(mat: np.ndarray, name: str) -> None:
    if np.abs(mat - mat.T).max() > 1e-9:
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(mat).min() < -1e-9:
        raise ValueError(f"{name} must be positive semi-definite")


@dataclass(frozen=True)
class LqrCostSpec:
    q_matrix: np.ndarray
    r_matrix: np.ndarray
    task_horizon: int
    x0_task: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q_matrix", np.asarray(self.q_matrix, dtype=float))
        object.__setattr__(self, "r_matrix", np.asarray(self.r_matrix, dtype=float))
        object.__setattr__(self, "x0_task", np.asarray(self.x0_task, dtype=float))
        _check_psd(self.q_matrix, "Q")
        _check_psd(self.r_matrix, "R")
        if self.task_horizon < 1:
            raise ValueError("task_horizon must be >= 1")


@dataclass(frozen=True)
class LqrPolicy:
    """Time-varying gains K_0..K_{T-1}, stacked (T, m, n)."""

    gains: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gains", np.asarray(self.gains, dtype=float))
        if not np.all(np.isfinite(self.gains)):
            raise ValueError("gains must be finite")

    def __call__(self, t: int, x: np.ndarray) -> np.ndarray:
        return self.gains[t] @ x


def solve_lqr(a_hat: np.ndarray, b: np.ndarray, cost: LqrCostSpec) -> LqrPolicy:
    """Backward Riccati recursion for the finite-horizon gains.

    P_T = Q;  K_t = -(R + B'P_{t+1}B)^{-1} B'P_{t+1} A;
    P_t = Q + K_t'RK_t + (A + BK_t)'P_{t+1}(A + BK_t), symmetrized each step.
    """
    a_hat = np.asarray(a_hat, dtype=float)
    b = np.asarray(b, dtype=float)
    q, r = cost.q_matrix, cost.r_matrix
    horizon = cost.task_horizon
    p = q.copy()
    gains = np.empty((horizon, b.shape[1], b.shape[0]))
    for t in reversed(range(horizon)):
        btp = b.T @ p
        m_mat = r + btp @ b
        try:
            k = -np.linalg.solve(m_mat, btp @ a_hat)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"singular (R + B'PB) at step {t}") from exc
        a_cl = a_hat + b @ k
        p = q + k.T @ r @ k + a_cl.T @ p @ a_cl
        p = 0.5 * (p + p.T)
        gains[t] = k
    return LqrPolicy(gains=gains)


def lqr_cost(traj: Trajectory, cost: LqrCostSpec) -> float:
    """Quadratic cost over true states x_1..x_T and the T applied actions."""
    if traj.horizon != cost.task_horizon:
        raise ValueError(
            f"trajectory horizon {traj.horizon} != task horizon {cost.task_horizon}"
        )
    x, u = traj.states, traj.actions
    if x.shape[1] != cost.q_matrix.shape[0] or u.shape[1] != cost.r_matrix.shape[0]:
        raise ValueError("trajectory dimensions do not match cost matrices")
    return float(
        np.einsum("ti,ij,tj->", x, cost.q_matrix, x)
        + np.einsum("ti,ij,tj->", u, cost.r_matrix, u)
    )


def simopt_closed_form(
    basis_u: np.ndarray,
    b: np.ndarray,
    traj: Trajectory,
    cap: float | None = 1.1,
) -> np.ndarray:
    """Exact least-squares eigenvalue estimate from an observed trajectory.

    In eigen-coordinates z_t = U' o_t and c_t = U' B u_t each eigenvalue
    decouples: theta_i = sum_t z_{t,i} (z_{t+1,i} - c_{t,i}) / sum_t z_{t,i}^2,
    with 0/0 resolved to 0 (pseudo-inverse convention). The estimate is
    clamped to +-cap when a cap is given.
    """
    basis_u = np.asarray(basis_u, dtype=float)
    _check_orthonormal(basis_u)
    if traj.horizon < 1:
        raise ValueError("trajectory must have at least one transition")
    z = traj.observations @ basis_u          # rows are U' o_t
    c = (traj.actions @ b.T) @ basis_u       # rows are U' B u_t
    num = (z[:-1] * (z[1:] - c)).sum(axis=0)
    den = (z[:-1] ** 2).sum(axis=0)
    theta = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    if cap is not None:
        theta = np.clip(theta, -cap, cap)
    return theta
