"""Explore -> identify -> plan -> execute pipeline and policy training.

Deploys an exploration policy on a sampled system, identifies the
eigenvalues from its observations, plans an LQR task policy with the
estimate, executes it on the true system, and scores the regret against the
oracle policy planned with the true parameters. Exploration policies are
trained on this pipeline with plane-fit finite-difference gradients, either
task-oriented (minimizing deployed task cost) or task-agnostic (minimizing
parameter estimation error).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .linear_system import (
    DIVERGENCE_LIMIT,
    LinearSystem,
    ThetaDistribution,
    draw_rollout_noise,
    rollout,
)
from .lqr import LqrCostSpec, lqr_cost, simopt_closed_form, solve_lqr
from .optim import AdamConfig, AdamState, PlaneFitSpec, adam_step, plane_fit_gradient
from .seeding import explore_task_keys, substream

REGRET_FLOOR = 1e-12

# Safety clip for the training loop: gradients are clipped to this multiple
# of the running median gradient norm over the trailing window. The
# threshold is deliberately loose; it exists to bound the very rare
# many-orders-of-magnitude outliers from destabilized task rollouts, not to
# normalize ordinary steps. See train_exploration.
GRAD_CLIP_FACTOR = 1000.0
GRAD_NORM_WINDOW = 200


@dataclass(frozen=True)
class ExplorationPolicy:
    """Time-invariant feedback gains plus a learned exploration start state."""

    gains_ke: np.ndarray
    x0_explore: np.ndarray
    explore_horizon: int

    def __post_init__(self):
        object.__setattr__(self, "gains_ke", np.asarray(self.gains_ke, dtype=float))
        object.__setattr__(self, "x0_explore", np.asarray(self.x0_explore, dtype=float))
        if not np.all(np.isfinite(self.gains_ke)) or not np.all(
            np.isfinite(self.x0_explore)
        ):
            raise ValueError("policy parameters must be finite")
        if self.explore_horizon < 1:
            raise ValueError("explore_horizon must be >= 1")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.gains_ke.ravel(), self.x0_explore])

    @classmethod
    def unflatten(
        cls, params: np.ndarray, action_dim: int, state_dim: int, horizon: int
    ) -> "ExplorationPolicy":
        params = np.asarray(params, dtype=float)
        split = action_dim * state_dim
        return cls(
            gains_ke=params[:split].reshape(action_dim, state_dim),
            x0_explore=params[split:],
            explore_horizon=horizon,
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.gains_ke @ x


@dataclass(frozen=True)
class ExplorationRegSpec:
    """LQR-like penalty on the exploration trajectory, weighted by gamma."""

    q_explore: np.ndarray
    r_explore: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "q_explore", np.asarray(self.q_explore, dtype=float))
        object.__setattr__(self, "r_explore", np.asarray(self.r_explore, dtype=float))
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True)
class LqrSetup:
    """Experiment-level fixed quantities: basis, input matrix, noise, cost."""

    basis_u: np.ndarray
    input_b: np.ndarray
    cost: LqrCostSpec
    obs_noise_std: float = 0.05
    dyn_noise_std: float = 0.05
    cap: float = 1.1

    @property
    def state_dim(self) -> int:
        return self.input_b.shape[0]

    @property
    def action_dim(self) -> int:
        return self.input_b.shape[1]

    def make_system(self, theta: np.ndarray) -> LinearSystem:
        return LinearSystem(
            basis_u=self.basis_u,
            theta=theta,
            input_b=self.input_b,
            obs_noise_std=self.obs_noise_std,
            dyn_noise_std=self.dyn_noise_std,
        )


@dataclass(frozen=True)
class TrainingConfig:
    objective: str  # "task_oriented" | "task_agnostic"
    adam: AdamConfig
    fd: PlaneFitSpec
    batch_size: int
    train_thetas: np.ndarray
    test_thetas: np.ndarray
    n_batches: int
    seed: int
    eval_interval: int = 25
    noiseless: bool = False

    def __post_init__(self):
        if self.objective not in ("task_oriented", "task_agnostic"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.train_thetas) == 0 or len(self.test_thetas) == 0:
            raise ValueError("train/test theta sets must be nonempty")


@dataclass(frozen=True)
class RegretReport:
    mean_regret: float
    mean_cost: float
    per_sample: list[tuple[np.ndarray, float, float]]
    n_excluded: int = 0


@dataclass(frozen=True)
class DeployResult:
    cost: float
    theta_hat: np.ndarray
    explore_traj: object
    task_traj: object
    task_policy: object


def init_exploration_policy(
    action_dim: int, state_dim: int, horizon: int, seed: int
) -> ExplorationPolicy:
    """Per-seed random initial policy; also the regret-ratio baseline."""
    rng = substream(seed, seeding.TAG_INIT_POLICY)
    return ExplorationPolicy(
        gains_ke=rng.normal(0.0, 0.1, size=(action_dim, state_dim)),
        x0_explore=rng.normal(0.0, 1.0, size=state_dim),
        explore_horizon=horizon,
    )


def deploy(
    policy: ExplorationPolicy,
    system: LinearSystem,
    cost: LqrCostSpec,
    rng: np.random.Generator | None = None,
    noiseless: bool = False,
    task_rng: np.random.Generator | None = None,
    cap: float | None = 1.1,
) -> DeployResult:
    """Run the full explore -> sys-id -> plan -> execute pipeline once.

    ``rng`` drives the exploration rollout noise and ``task_rng`` the task
    rollout noise; if ``task_rng`` is omitted the task rollout continues on
    ``rng``. Passing the same ``task_rng`` stream to the oracle rollout lets
    callers compute regret under shared noise realizations.
    """
    explore_traj = rollout(
        system, policy, policy.x0_explore, policy.explore_horizon, rng, noiseless
    )
    theta_hat = simopt_closed_form(
        system.basis_u, system.input_b, explore_traj, cap=cap
    )
    a_hat = (system.basis_u * theta_hat) @ system.basis_u.T
    task_policy = solve_lqr(a_hat, system.input_b, cost)
    step = [0]

    def controller(x: np.ndarray) -> np.ndarray:
        u = task_policy.gains[step[0]] @ x
        step[0] += 1
        return u

    task_traj = rollout(
        system,
        controller,
        cost.x0_task,
        cost.task_horizon,
        task_rng if task_rng is not None else rng,
        noiseless,
    )
    return DeployResult(
        cost=lqr_cost(task_traj, cost),
        theta_hat=theta_hat,
        explore_traj=explore_traj,
        task_traj=task_traj,
        task_policy=task_policy,
    )


# ---------------------------------------------------------------------------
# Vectorized pipeline core
#
# Evaluates the deploy pipeline for F parameter vectors x B systems at once.
# Semantics (noise streams, divergence freezing, 0/0 conventions) match the
# per-sample functions above; tests pin the equivalence.
# ---------------------------------------------------------------------------


def _draw_batch_noise(
    setup: LqrSetup,
    seed: int,
    tag: int,
    idx_prefix: tuple[int, ...],
    n_systems: int,
    explore_horizon: int,
    noiseless: bool,
) -> dict:
    n = setup.state_dim
    t_tau = setup.cost.task_horizon
    ev = np.empty((n_systems, explore_horizon + 1, n))
    ew = np.empty((n_systems, explore_horizon, n))
    tw = np.empty((n_systems, t_tau, n))
    for i in range(n_systems):
        e_ss, t_ss = explore_task_keys(seed, tag, *idx_prefix, i)
        ev[i], ew[i] = draw_rollout_noise(
            np.random.default_rng(e_ss), explore_horizon, n,
            setup.obs_noise_std, setup.dyn_noise_std, noiseless,
        )
        _, tw[i] = draw_rollout_noise(
            np.random.default_rng(t_ss), t_tau, n,
            setup.obs_noise_std, setup.dyn_noise_std, noiseless,
        )
    return {"explore_v": ev, "explore_w": ew, "task_w": tw}


def _masked_step(a, x, u, w, b_t, diverged):
    """One frozen-aware dynamics step shared by the batched rollouts."""
    u = np.where(diverged[..., None], 0.0, u)
    x_next = (a @ x[..., None])[..., 0] + u @ b_t + w
    nonfinite = ~np.isfinite(x_next).all(axis=-1)
    x_next = np.where(nonfinite[..., None], x, x_next)
    x_next = np.where(diverged[..., None], x, x_next)
    over = np.abs(x_next).max(axis=-1) > DIVERGENCE_LIMIT
    diverged = diverged | nonfinite | over
    return x_next, u, diverged


def _batched_riccati(a_hat: np.ndarray, b: np.ndarray, cost: LqrCostSpec) -> np.ndarray:
    """Stacked backward recursion; a_hat has shape (..., n, n).

    Returns gains with shape (T, ..., m, n).
    """
    q, r = cost.q_matrix, cost.r_matrix
    p = np.broadcast_to(q, a_hat.shape).copy()
    b_t = b.T
    gains = np.empty((cost.task_horizon, *a_hat.shape[:-2], b.shape[1], b.shape[0]))
    for t in reversed(range(cost.task_horizon)):
        btp = b_t @ p
        k = -np.linalg.solve(r + btp @ b, btp @ a_hat)
        a_cl = a_hat + b @ k
        k_t = np.swapaxes(k, -1, -2)
        p = q + k_t @ r @ k + np.swapaxes(a_cl, -1, -2) @ p @ a_cl
        p = 0.5 * (p + np.swapaxes(p, -1, -2))
        gains[t] = k
    return gains


def _batched_deploy(
    setup: LqrSetup,
    thetas: np.ndarray,
    gains_ke: np.ndarray,
    x0_explore: np.ndarray,
    noise: dict,
    need_oracle: bool = False,
) -> dict:
    """Pipeline over F parameter rows x B systems.

    gains_ke: (F, m, n); x0_explore: (F, n); thetas: (B, n). Returns deployed
    costs (F, B), estimates (F, B, n), exploration penalties h split into
    state/action parts (F, B), and optionally oracle costs (B,).
    """
    u_mat, b = setup.basis_u, setup.input_b
    q, r = setup.cost.q_matrix, setup.cost.r_matrix
    b_t = b.T
    n_f = gains_ke.shape[0]
    n_b = thetas.shape[0]
    t_e = noise["explore_w"].shape[1]
    t_tau = setup.cost.task_horizon

    a_true = (u_mat * thetas[:, None, :]) @ u_mat.T  # (B, n, n)
    ke_t = np.swapaxes(gains_ke, -1, -2)[:, None]    # (F, 1, n, m)

    # Exploration rollout.
    x = np.broadcast_to(x0_explore[:, None, :], (n_f, n_b, x0_explore.shape[1])).copy()
    obs = [x + noise["explore_v"][None, :, 0]]
    acts = []
    diverged = np.zeros((n_f, n_b), dtype=bool)
    for t in range(t_e):
        u = (x[..., None, :] @ ke_t)[..., 0, :]
        x, u, diverged = _masked_step(
            a_true[None], x, u, noise["explore_w"][None, :, t], b_t, diverged
        )
        obs.append(x + noise["explore_v"][None, :, t + 1])
        acts.append(u)
    obs = np.stack(obs, axis=2)    # (F, B, T_e+1, n)
    acts = np.stack(acts, axis=2)  # (F, B, T_e, m)

    # Closed-form sys-id in eigen-coordinates on the observations.
    z = obs @ u_mat
    c = (acts @ b_t) @ u_mat
    num = (z[..., :-1, :] * (z[..., 1:, :] - c)).sum(axis=-2)
    den = (z[..., :-1, :] ** 2).sum(axis=-2)
    theta_hat = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    theta_hat = np.clip(theta_hat, -setup.cap, setup.cap)

    a_hat = (u_mat * theta_hat[..., None, :]) @ u_mat.T  # (F, B, n, n)
    gains = _batched_riccati(a_hat, b, setup.cost)

    # Task rollout with the true dynamics and per-system task noise.
    x = np.broadcast_to(setup.cost.x0_task, (n_f, n_b, setup.state_dim)).copy()
    cost_dep = np.zeros((n_f, n_b))
    div_task = np.zeros((n_f, n_b), dtype=bool)
    for t in range(t_tau):
        u = (gains[t] @ x[..., None])[..., 0]
        x, u, div_task = _masked_step(
            a_true[None], x, u, noise["task_w"][None, :, t], b_t, div_task
        )
        cost_dep += (x * (x @ q)).sum(-1) + (u * (u @ r)).sum(-1)

    out = {"cost": cost_dep, "theta_hat": theta_hat}

    # Exploration regularization uses the true states (obs noise removed),
    # matching the quadratic cost convention: x_1..x_T and the T actions.
    states = obs - noise["explore_v"][None]
    out["h_states"] = states[..., 1:, :]
    out["h_actions"] = acts

    if need_oracle:
        gains_star = _batched_riccati(a_true, b, setup.cost)
        x = np.broadcast_to(setup.cost.x0_task, (n_b, setup.state_dim)).copy()
        cost_star = np.zeros(n_b)
        div_star = np.zeros(n_b, dtype=bool)
        for t in range(t_tau):
            u = (gains_star[t] @ x[..., None])[..., 0]
            x, u, div_star = _masked_step(
                a_true, x, u, noise["task_w"][:, t], b_t, div_star
            )
            cost_star += (x * (x @ q)).sum(-1) + (u * (u @ r)).sum(-1)
        out["oracle_cost"] = cost_star
    return out


def _reg_penalty(result: dict, reg: ExplorationRegSpec) -> np.ndarray:
    """Per-deployment h(pi_e) = sum x'Q_e x + u'R_e u over the exploration
    trajectory."""
    xs = result["h_states"]
    us = result["h_actions"]
    return (
        np.einsum("...ti,ij,...tj->...", xs, reg.q_explore, xs)
        + np.einsum("...ti,ij,...tj->...", us, reg.r_explore, us)
    )


def _batch_indices(seed: int, step: int, batch_size: int, n_train: int) -> np.ndarray:
    """Without-replacement batch that cycles through per-epoch permutations."""
    start = step * batch_size
    idx: list[int] = []
    pos = start
    while len(idx) < batch_size:
        epoch, offset = divmod(pos, n_train)
        perm = substream(seed, seeding.TAG_SHUFFLE, epoch).permutation(n_train)
        take = min(batch_size - len(idx), n_train - offset)
        idx.extend(perm[offset : offset + take])
        pos += take
    return np.asarray(idx)


def _loss_rows(
    param_rows: np.ndarray,
    setup: LqrSetup,
    cfg: TrainingConfig,
    reg: ExplorationRegSpec,
    thetas: np.ndarray,
    noise: dict,
) -> np.ndarray:
    """Training loss for each flattened-parameter row, shape (F,)."""
    m, n = setup.action_dim, setup.state_dim
    rows = np.atleast_2d(np.asarray(param_rows, dtype=float))
    ke = rows[:, : m * n].reshape(-1, m, n)
    x0e = rows[:, m * n :]
    result = _batched_deploy(setup, thetas, ke, x0e, noise)
    penalty = _reg_penalty(result, reg)
    if cfg.objective == "task_oriented":
        base = result["cost"]
    else:
        base = ((result["theta_hat"] - thetas) ** 2).sum(-1)
    return base.mean(axis=-1) + reg.gamma * penalty.mean(axis=-1)


def exploration_loss(
    params: np.ndarray,
    setup: LqrSetup,
    cfg: TrainingConfig,
    reg: ExplorationRegSpec,
    explore_horizon: int,
    step: int = 0,
) -> float:
    """Training objective at one gradient step.

    The batch of systems is drawn without replacement from the training set
    (cycling through per-epoch permutations keyed by the config seed), and
    every rollout uses the substream keyed by (seed, phase, step, member),
    so the loss is a pure function of (params, cfg, step).
    """
    idx = _batch_indices(cfg.seed, step, cfg.batch_size, len(cfg.train_thetas))
    thetas = cfg.train_thetas[idx]
    noise = _draw_batch_noise(
        setup, cfg.seed, seeding.TAG_TRAIN_NOISE, (step,), len(thetas),
        explore_horizon, cfg.noiseless,
    )
    return float(
        _loss_rows(params, setup, cfg, reg, thetas, noise)[0]
    )


def evaluate_expected_regret(
    policy: ExplorationPolicy,
    setup: LqrSetup,
    thetas: np.ndarray | ThetaDistribution,
    n: int | None = None,
    seed: int = 0,
    noiseless: bool = False,
) -> RegretReport:
    """Mean regret of the deployed pipeline over sampled or given systems.

    For each theta the oracle cost (planning with the true parameters) and
    the deployed cost share the same task-noise substream, so each regret
    sample isolates identification error. Non-finite samples are excluded
    and counted.
    """
    if isinstance(thetas, ThetaDistribution):
        if n is None or n < 1:
            raise ValueError("n >= 1 required when sampling from a distribution")
        rng = substream(seed, seeding.TAG_TEST_THETAS)
        theta_set = np.clip(
            rng.normal(thetas.mean, thetas.std, size=(n, thetas.dim)),
            -thetas.cap, thetas.cap,
        )
    else:
        theta_set = np.asarray(thetas, dtype=float)
    noise = _draw_batch_noise(
        setup, seed, seeding.TAG_EVAL_NOISE, (), len(theta_set),
        policy.explore_horizon, noiseless,
    )
    result = _batched_deploy(
        setup, theta_set, policy.gains_ke[None], policy.x0_explore[None], noise,
        need_oracle=True,
    )
    deployed = result["cost"][0]
    psi = deployed - result["oracle_cost"]
    ok = np.isfinite(psi)
    per_sample = [
        (theta_set[i], float(psi[i]), float(deployed[i]))
        for i in range(len(theta_set))
        if ok[i]
    ]
    if not per_sample:
        raise ValueError("all regret samples failed")
    return RegretReport(
        mean_regret=float(psi[ok].mean()),
        mean_cost=float(deployed[ok].mean()),
        per_sample=per_sample,
        n_excluded=int((~ok).sum()),
    )


def regret_ratio(
    policy: ExplorationPolicy,
    baseline: ExplorationPolicy,
    setup: LqrSetup,
    test_thetas: np.ndarray,
    seed: int = 0,
    noiseless: bool = False,
    baseline_regret: float | None = None,
) -> float:
    """Mean test regret of ``policy`` relative to ``baseline``.

    Both sides are evaluated on the same theta set and noise substreams;
    ``baseline_regret`` can be passed to reuse a cached baseline evaluation.
    """
    if baseline_regret is None:
        baseline_regret = evaluate_expected_regret(
            baseline, setup, test_thetas, seed=seed, noiseless=noiseless
        ).mean_regret
    if baseline_regret <= REGRET_FLOOR:
        raise ValueError(
            f"baseline regret {baseline_regret:.3e} is below the numeric floor; "
            "ratio undefined"
        )
    report = evaluate_expected_regret(
        policy, setup, test_thetas, seed=seed, noiseless=noiseless
    )
    return report.mean_regret / baseline_regret


@dataclass(frozen=True)
class CurvePoint:
    batch: int
    loss: float
    regret_ratio: float


@dataclass(frozen=True)
class TrainResult:
    policy: ExplorationPolicy
    curve: list[CurvePoint]
    aborted: bool = False


def train_exploration(
    setup: LqrSetup,
    cfg: TrainingConfig,
    reg: ExplorationRegSpec,
    init: ExplorationPolicy,
) -> TrainResult:
    """Adam over plane-fit gradients of the exploration loss.

    Evaluates the test regret ratio against the initial policy every
    ``eval_interval`` batches (and at batch 0 and the final batch). On a
    non-finite gradient the step is retried once with a halved perturbation
    scale; a second failure aborts with the partial curve.

    Task costs are heavy tailed: a batch containing a system that the
    planned policy destabilizes can produce a gradient many orders of
    magnitude above typical, which would sit in Adam's slowly decaying
    second moment and stall training for thousands of steps. Gradients are
    therefore clipped to ``GRAD_CLIP_FACTOR`` times the running median of
    recent gradient norms before the optimizer sees them.
    """
    m, n = setup.action_dim, setup.state_dim
    horizon = init.explore_horizon
    params = init.flatten()
    adam_state = AdamState.zeros(params.size)
    norm_history: list[float] = []
    baseline_regret = evaluate_expected_regret(
        init, setup, cfg.test_thetas, seed=cfg.seed, noiseless=cfg.noiseless
    ).mean_regret

    def ratio_of(p: np.ndarray) -> float:
        policy = ExplorationPolicy.unflatten(p, m, n, horizon)
        return regret_ratio(
            policy, init, setup, cfg.test_thetas, seed=cfg.seed,
            noiseless=cfg.noiseless, baseline_regret=baseline_regret,
        )

    curve = [CurvePoint(0, exploration_loss(params, setup, cfg, reg, horizon, 0),
                        ratio_of(params))]
    if cfg.n_batches == 0:
        return TrainResult(policy=init, curve=curve)

    aborted = False
    for step in range(cfg.n_batches):
        idx = _batch_indices(cfg.seed, step, cfg.batch_size, len(cfg.train_thetas))
        thetas = cfg.train_thetas[idx]
        noise = _draw_batch_noise(
            setup, cfg.seed, seeding.TAG_TRAIN_NOISE, (step,), len(thetas),
            horizon, cfg.noiseless,
        )

        def f_batch(rows: np.ndarray) -> np.ndarray:
            return _loss_rows(rows, setup, cfg, reg, thetas, noise)

        def f_single(p: np.ndarray) -> float:
            return float(f_batch(p[None])[0])

        fd_spec = cfg.fd
        grad = plane_fit_gradient(
            f_single, params, fd_spec, substream(cfg.seed, seeding.TAG_FD, step),
            f_batch=f_batch,
        ).gradient
        if not np.all(np.isfinite(grad)):
            fd_spec = replace(fd_spec, delta=fd_spec.delta / 2)
            grad = plane_fit_gradient(
                f_single, params, fd_spec,
                substream(cfg.seed, seeding.TAG_FD, step), f_batch=f_batch,
            ).gradient
            if not np.all(np.isfinite(grad)):
                aborted = True
                break
        grad_norm = float(np.linalg.norm(grad))
        norm_history.append(grad_norm)
        clip_at = GRAD_CLIP_FACTOR * float(
            np.median(norm_history[-GRAD_NORM_WINDOW:])
        )
        if grad_norm > clip_at > 0:
            grad = grad * (clip_at / grad_norm)
        params, adam_state = adam_step(params, grad, adam_state, cfg.adam)
        batch_no = step + 1
        if batch_no % cfg.eval_interval == 0 or batch_no == cfg.n_batches:
            curve.append(
                CurvePoint(batch_no, f_single(params), ratio_of(params))
            )
    return TrainResult(
        policy=ExplorationPolicy.unflatten(params, m, n, horizon),
        curve=curve,
        aborted=aborted,
    )
