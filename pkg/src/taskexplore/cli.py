"""Experiment runner CLI.

Subcommands: ``lqr`` (exploration-policy training on sampled linear
systems), ``pour`` (Bernoulli measurement-allocation training), and
``reps-simopt`` (REPS-based sys-id cross-checked against the closed form
on a shared trajectory). Emits curve.csv and summary.json artifacts whose
bytes depend only on the resolved config and seed list.

Exit codes: 0 success, 1 config error, 2 partial failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .linear_system import (
    ThetaDistribution,
    Trajectory,
    random_input_matrix,
    random_orthonormal_basis,
    rollout,
    sample_theta,
    sample_theta_set,
)
from .lqr import LqrCostSpec, simopt_closed_form
from .optim import AdamConfig, PlaneFitSpec, RepsState, reps_update
from .pipeline import (
    ExplorationPolicy,
    ExplorationRegSpec,
    LqrSetup,
    TrainingConfig,
    init_exploration_policy,
    train_exploration,
)
from .pouring import (
    PouringGoal,
    PouringTrainConfig,
    evaluate_pouring_cost,
    train_pouring,
)
from .seeding import substream


class ConfigError(Exception):
    """Invalid configuration; maps to exit code 1."""


LQR_DEFAULTS: dict = {
    "state_dim": 6,
    "action_dim": 3,
    "task_horizon": 20,
    "explore_horizon": 4,
    "q_diag": [100.0, 100.0, 10.0, 10.0, 10.0, 1.0],
    "r_diag": [0.1, 0.1, 0.1],
    "theta_mean": [0.9, 0.9, 0.9, 0.6, 0.6, 0.6],
    "theta_std": 0.2,
    "theta_cap": 1.1,
    "obs_noise_std": 0.05,
    "dyn_noise_std": 0.05,
    # beta2 = 0.9: task costs are heavy tailed and a long second-moment
    # memory lets one extreme batch suppress updates for thousands of steps.
    "adam": {"alpha": 1e-4, "beta1": 0.9, "beta2": 0.9, "eps": 1e-8,
             "weight_decay": 0.1},
    "batch_size": 70,
    "n_train": 1000,
    "n_test": 100,
    "n_batches": 2000,
    "gamma": 1.0,
    "q_explore_scale": 0.01,
    "r_explore_scale": 0.01,
    "fd_delta": 1e-3,
    "fd_lower": -10.0,
    "fd_upper": 10.0,
    "eval_interval": 25,
    "system_seed": 12345,
}

POUR_DEFAULTS: dict = {
    "horizon": 6,
    "meas_noise_std": 30.0,
    "pour_noise_std": 5.0,
    "mass_lo": 150.0,
    "mass_hi": 300.0,
    "goal_mean": 50.0,
    "goal_std": 15.0,
    "adam": {"alpha": 5e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
             "weight_decay": 0.0},
    "batch_size": 100,
    "n_batches": 2000,
    "fd_delta": 0.05,
    "fd_lower": 0.01,
    "fd_upper": 0.99,
    "fd_samples": 16,
    "p_init": 0.5,
    "eval_interval": 25,
}

REPS_DEFAULTS: dict = {
    "eps_kl": 1.0,
    "iters": 10,
    "samples_per_iter": 50,
    "prior_std": 0.3,
    "explore_horizon": 4,
    "system_seed": 12345,
}

_OBJECTIVE_MAP = {"task-oriented": "task_oriented", "task-agnostic": "task_agnostic"}


def _merge_config(defaults: dict, overrides: dict, context: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {context + key!r}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {context + key!r} must be a mapping")
            merged[key] = _merge_config(merged[key], value, context=key + ".")
        else:
            merged[key] = value
    return merged


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str            # "lqr" | "pouring" | "reps-simopt"
    objective: str             # "task-oriented" | "task-agnostic" | "both"
    seeds: list[int]
    noiseless: bool
    params: dict
    output_dir: Path


@dataclass(frozen=True)
class RunArtifacts:
    curve_csv: Path | None
    summary_json: Path
    manifest: dict


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def _write_curve(path: Path, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    for row in sorted(rows, key=lambda r: (r[0], r[1], r[2])):
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def make_lqr_setup(params: dict) -> tuple[LqrSetup, ThetaDistribution, np.ndarray, np.ndarray]:
    """Fixed basis, input matrix, cost, and train/test eigenvalue sets.

    Everything here is keyed by ``system_seed`` and shared across training
    seeds so that regret ratios are comparable between runs.
    """
    n, m = params["state_dim"], params["action_dim"]
    rng = substream(params["system_seed"], seeding.TAG_SYSTEM)
    basis_u = random_orthonormal_basis(n, rng)
    input_b = random_input_matrix(n, m, rng)
    cost = LqrCostSpec(
        q_matrix=np.diag(params["q_diag"]),
        r_matrix=np.diag(params["r_diag"]),
        task_horizon=params["task_horizon"],
        x0_task=np.ones(n) / np.sqrt(n),
    )
    setup = LqrSetup(
        basis_u=basis_u,
        input_b=input_b,
        cost=cost,
        obs_noise_std=params["obs_noise_std"],
        dyn_noise_std=params["dyn_noise_std"],
        cap=params["theta_cap"],
    )
    dist = ThetaDistribution(
        mean=np.asarray(params["theta_mean"], dtype=float),
        std=params["theta_std"],
        cap=params["theta_cap"],
    )
    train_thetas = sample_theta_set(
        dist, params["n_train"], substream(params["system_seed"], seeding.TAG_TRAIN_THETAS)
    )
    test_thetas = sample_theta_set(
        dist, params["n_test"], substream(params["system_seed"], seeding.TAG_TEST_THETAS)
    )
    return setup, dist, train_thetas, test_thetas


def _run_lqr_one(
    params: dict, seed: int, objective: str, noiseless: bool,
    setup: LqrSetup, train_thetas: np.ndarray, test_thetas: np.ndarray,
):
    n, m = params["state_dim"], params["action_dim"]
    n_params = m * n + n
    cfg = TrainingConfig(
        objective=_OBJECTIVE_MAP[objective],
        adam=AdamConfig(**params["adam"]),
        fd=PlaneFitSpec(
            delta=params["fd_delta"], lower=params["fd_lower"],
            upper=params["fd_upper"], n_samples=2 * n_params + 2,
        ),
        batch_size=params["batch_size"],
        train_thetas=train_thetas,
        test_thetas=test_thetas,
        n_batches=params["n_batches"],
        seed=seed,
        eval_interval=params["eval_interval"],
        noiseless=noiseless,
    )
    reg = ExplorationRegSpec(
        q_explore=params["q_explore_scale"] * np.eye(n),
        r_explore=params["r_explore_scale"] * np.eye(m),
        gamma=params["gamma"],
    )
    init = init_exploration_policy(m, n, params["explore_horizon"], seed)
    result = train_exploration(setup, cfg, reg, init)
    rows = [
        (seed, objective, pt.batch, pt.loss, pt.regret_ratio) for pt in result.curve
    ]
    final = result.curve[-1]
    metrics = {
        "seed": seed,
        "objective": objective,
        "final_batch": final.batch,
        "final_loss": final.loss,
        "final_regret_ratio_test": final.regret_ratio,
        "aborted": result.aborted,
    }
    return rows, metrics


def _run_pour_one(params: dict, seed: int, objective: str, noiseless: bool):
    cfg = PouringTrainConfig(
        adam=AdamConfig(**params["adam"]),
        fd=PlaneFitSpec(
            delta=params["fd_delta"], lower=params["fd_lower"],
            upper=params["fd_upper"], n_samples=params["fd_samples"],
        ),
        batch_size=params["batch_size"],
        n_batches=params["n_batches"],
        horizon=params["horizon"],
        p_init=params["p_init"],
        mass_lo=params["mass_lo"],
        mass_hi=params["mass_hi"],
        meas_noise_std=params["meas_noise_std"],
        pour_noise_std=params["pour_noise_std"],
        eval_interval=params["eval_interval"],
    )
    goal = PouringGoal(goal_mean=params["goal_mean"], goal_std=params["goal_std"])
    result = train_pouring(
        _OBJECTIVE_MAP[objective], cfg, seed, goal=goal, noiseless=noiseless
    )
    rows = [(seed, objective, pt.batch, pt.loss, pt.p_e) for pt in result.curve]
    metrics = {
        "seed": seed,
        "objective": objective,
        "final_batch": result.curve[-1].batch,
        "final_loss": result.curve[-1].loss,
        "final_p_e": result.p_e,
        "final_mean_cost": evaluate_pouring_cost(result.p_e, cfg, seed, goal=goal),
    }
    return rows, metrics


def reps_simopt(
    basis_u: np.ndarray,
    b: np.ndarray,
    traj: Trajectory,
    prior: RepsState,
    iters: int,
    samples_per_iter: int,
    rng: np.random.Generator,
    cap: float = 1.1,
) -> tuple[np.ndarray, bool]:
    """Eigenvalue sys-id with derivative-free search instead of closed form.

    Candidates are scored by the negative sum of squared one-step prediction
    errors against the recorded observations; the search distribution is
    reweighted each iteration under the KL step bound. Returns the final
    mean clamped to the cap and a flag for any stalled update.
    """
    z = traj.observations @ basis_u
    c = (traj.actions @ b.T) @ basis_u
    state = prior
    stalled_any = False
    for _ in range(iters):
        cand = rng.multivariate_normal(
            state.mu_z, state.sigma_z, size=samples_per_iter, method="cholesky"
        )
        resid = cand[:, None, :] * z[None, :-1, :] + c[None] - z[None, 1:, :]
        rewards = -(resid**2).sum(axis=(1, 2))
        state, stalled = reps_update(state, cand, rewards)
        stalled_any = stalled_any or stalled
    return np.clip(state.mu_z, -cap, cap), stalled_any


def run_reps_simopt_demo(params: dict, seed: int, noiseless: bool) -> dict:
    """One sys-id comparison on a shared exciting exploration trajectory."""
    lqr_params = _merge_config(LQR_DEFAULTS, {"system_seed": params["system_seed"]})
    setup, dist, _, _ = make_lqr_setup(lqr_params)
    n, m = setup.state_dim, setup.action_dim
    theta = sample_theta(dist, substream(seed, seeding.TAG_TEST_THETAS))
    system = setup.make_system(theta)
    # Exciting exploration: start with unit mass in every eigendirection,
    # small random feedback gains.
    gains = substream(seed, seeding.TAG_INIT_POLICY).normal(0.0, 0.1, size=(m, n))
    x0 = setup.basis_u @ np.ones(n)
    policy = ExplorationPolicy(gains, x0, params["explore_horizon"])
    e_ss, _ = seeding.explore_task_keys(seed, seeding.TAG_EVAL_NOISE, 0)
    traj = rollout(
        system, policy, x0, params["explore_horizon"],
        np.random.default_rng(e_ss), noiseless,
    )
    theta_cf = simopt_closed_form(setup.basis_u, setup.input_b, traj, cap=setup.cap)
    prior = RepsState(
        mu_z=dist.mean.copy(),
        sigma_z=params["prior_std"] ** 2 * np.eye(n),
        eps_kl=params["eps_kl"],
    )
    theta_reps, stalled = reps_simopt(
        setup.basis_u, setup.input_b, traj, prior,
        params["iters"], params["samples_per_iter"],
        substream(seed, seeding.TAG_REPS), cap=setup.cap,
    )
    return {
        "seed": seed,
        "theta_true": theta.tolist(),
        "theta_closed_form": theta_cf.tolist(),
        "theta_reps": theta_reps.tolist(),
        "linf_reps_vs_closed_form": float(np.abs(theta_reps - theta_cf).max()),
        "stalled": stalled,
    }


def _max_workers(n_tasks: int) -> int:
    env = os.environ.get("EXPLORE_THREADS")
    if env is not None:
        try:
            cap = int(env)
        except ValueError as exc:
            raise ConfigError(f"EXPLORE_THREADS must be an integer, got {env!r}") from exc
        if cap < 1:
            raise ConfigError("EXPLORE_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(n_tasks, cap))


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Run all (seed, objective) combinations and write artifacts.

    Returns the artifact paths; raises ConfigError on invalid input. Partial
    failures complete the remaining runs and are listed in the manifest.
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "experiment": cfg.experiment,
        "objective": cfg.objective,
        "seeds": list(cfg.seeds),
        "noiseless": cfg.noiseless,
        "params": cfg.params,
    }
    summary: dict = {"config": resolved}
    manifest = {
        "seeds": list(cfg.seeds),
        "failures": [],
        "config_sha256": _config_hash(resolved),
    }

    if cfg.experiment == "reps-simopt":
        results = []
        for seed in cfg.seeds:
            try:
                results.append(run_reps_simopt_demo(cfg.params, seed, cfg.noiseless))
            except Exception as exc:  # noqa: BLE001 - reported in manifest
                manifest["failures"].append({"seed": seed, "error": str(exc)})
        summary["results"] = results
        summary["manifest"] = manifest
        path = out / "summary.json"
        path.write_text(json.dumps(summary, indent=2) + "\n")
        return RunArtifacts(curve_csv=None, summary_json=path, manifest=manifest)

    if cfg.objective == "both":
        objectives = ["task-agnostic", "task-oriented"]
    else:
        objectives = [cfg.objective]
    tasks = [(seed, obj) for seed in cfg.seeds for obj in objectives]

    if cfg.experiment == "lqr":
        setup, _, train_thetas, test_thetas = make_lqr_setup(cfg.params)

        def run_one(task):
            seed, obj = task
            return _run_lqr_one(
                cfg.params, seed, obj, cfg.noiseless, setup, train_thetas, test_thetas
            )

        header = ["seed", "objective", "batch", "loss", "regret_ratio_test"]
    elif cfg.experiment == "pouring":

        def run_one(task):
            seed, obj = task
            return _run_pour_one(cfg.params, seed, obj, cfg.noiseless)

        header = ["seed", "objective", "batch", "loss", "p_e"]
    else:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")

    rows: list[tuple] = []
    metrics: list[dict] = []
    with ThreadPoolExecutor(max_workers=_max_workers(len(tasks))) as pool:
        futures = {pool.submit(run_one, task): task for task in tasks}
        for future, task in futures.items():
            try:
                task_rows, task_metrics = future.result()
                rows.extend(task_rows)
                metrics.append(task_metrics)
            except Exception as exc:  # noqa: BLE001 - reported in manifest
                manifest["failures"].append(
                    {"seed": task[0], "objective": task[1], "error": str(exc)}
                )

    metrics.sort(key=lambda rec: (rec["seed"], rec["objective"]))
    summary["runs"] = metrics
    summary["by_objective"] = {}
    for obj in objectives:
        finals = [rec for rec in metrics if rec["objective"] == obj]
        if not finals:
            continue
        key = "final_regret_ratio_test" if cfg.experiment == "lqr" else "final_p_e"
        values = np.array([rec[key] for rec in finals])
        summary["by_objective"][obj] = {
            f"mean_{key}": float(values.mean()),
            f"std_{key}": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
            "n_runs": len(finals),
        }
    summary["manifest"] = manifest

    curve_path = out / "curve.csv"
    _write_curve(curve_path, header, rows)
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return RunArtifacts(
        curve_csv=curve_path, summary_json=summary_path, manifest=manifest
    )


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            try:
                seeds.extend(range(int(lo), int(hi) + 1))
            except ValueError as exc:
                raise ConfigError(f"bad seed range {part!r}") from exc
        elif part:
            try:
                seeds.append(int(part))
            except ValueError as exc:
                raise ConfigError(f"bad seed {part!r}") from exc
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # reject, never ignore; exit code 1 via ConfigError
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="explore", description=__doc__)
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in ("lqr", "pour", "reps-simopt"):
        p = sub.add_parser(name)
        p.add_argument(
            "--objective", default="both",
            choices=["task-oriented", "task-agnostic", "both"],
        )
        p.add_argument("--seeds", default="0", help="e.g. 0..4 or 0,1,7")
        p.add_argument("--seed", type=int, default=None, help="single-seed shorthand")
        p.add_argument("--n-batches", type=int, default=None)
        p.add_argument("--noiseless", action="store_true")
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("runs") / name)
    return parser


def _load_config_file(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    return data


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    experiment = {"lqr": "lqr", "pour": "pouring", "reps-simopt": "reps-simopt"}[
        args.experiment
    ]
    defaults = {
        "lqr": LQR_DEFAULTS, "pouring": POUR_DEFAULTS, "reps-simopt": REPS_DEFAULTS
    }[experiment]
    overrides = _load_config_file(args.config) if args.config else {}
    params = _merge_config(defaults, overrides)
    if args.n_batches is not None:
        if experiment == "reps-simopt":
            raise ConfigError("--n-batches does not apply to reps-simopt")
        if args.n_batches < 0:
            raise ConfigError("--n-batches must be >= 0")
        params["n_batches"] = args.n_batches
    seeds = [args.seed] if args.seed is not None else _parse_seeds(args.seeds)
    return ExperimentConfig(
        experiment=experiment,
        objective=args.objective,
        seeds=seeds,
        noiseless=args.noiseless,
        params=params,
        output_dir=args.out,
    )


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
        artifacts = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if artifacts.manifest["failures"]:
        print(
            f"{len(artifacts.manifest['failures'])} run(s) failed; "
            f"see {artifacts.summary_json}",
            file=sys.stderr,
        )
        return 2
    print(artifacts.summary_json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
