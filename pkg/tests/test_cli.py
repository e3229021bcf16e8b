"""Tests for the experiment runner and the REPS-based sys-id demo."""

import json

import numpy as np
import pytest

from taskexplore.cli import (
    LQR_DEFAULTS,
    POUR_DEFAULTS,
    ConfigError,
    ExperimentConfig,
    main,
    make_lqr_setup,
    reps_simopt,
    run_experiment,
)
from taskexplore.linear_system import Trajectory, rollout
from taskexplore.lqr import simopt_closed_form
from taskexplore.optim import RepsState, reps_solve_temperature, reps_weights
from taskexplore.pipeline import ExplorationPolicy


def test_lqr_defaults_match_reference_settings():
    assert LQR_DEFAULTS["state_dim"] == 6
    assert LQR_DEFAULTS["action_dim"] == 3
    assert LQR_DEFAULTS["task_horizon"] == 20
    assert LQR_DEFAULTS["explore_horizon"] == 4
    assert LQR_DEFAULTS["q_diag"] == [100.0, 100.0, 10.0, 10.0, 10.0, 1.0]
    assert LQR_DEFAULTS["r_diag"] == [0.1, 0.1, 0.1]
    assert LQR_DEFAULTS["theta_mean"] == [0.9, 0.9, 0.9, 0.6, 0.6, 0.6]
    assert LQR_DEFAULTS["theta_std"] == 0.2
    assert LQR_DEFAULTS["adam"]["alpha"] == 1e-4
    assert LQR_DEFAULTS["adam"]["weight_decay"] == 0.1
    assert LQR_DEFAULTS["batch_size"] == 70
    assert LQR_DEFAULTS["n_train"] == 1000
    assert LQR_DEFAULTS["n_test"] == 100


def test_pour_defaults_match_reference_settings():
    assert POUR_DEFAULTS["horizon"] == 6
    assert POUR_DEFAULTS["meas_noise_std"] == 30.0
    assert POUR_DEFAULTS["pour_noise_std"] == 5.0
    assert POUR_DEFAULTS["fd_delta"] == 0.05
    assert POUR_DEFAULTS["adam"]["alpha"] == 5e-3
    assert POUR_DEFAULTS["batch_size"] == 100


def test_lqr_run_writes_artifacts(tmp_path):
    code = main([
        "lqr", "--objective", "both", "--seeds", "0..1",
        "--n-batches", "2", "--out", str(tmp_path),
    ])
    assert code == 0
    curve = (tmp_path / "curve.csv").read_text().splitlines()
    assert curve[0] == "seed,objective,batch,loss,regret_ratio_test"
    # Both seeds and both objectives present, sorted.
    firsts = [line.split(",")[:2] for line in curve[1:]]
    assert firsts == sorted(firsts)
    assert {f[1] for f in firsts} == {"task-agnostic", "task-oriented"}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["manifest"]["seeds"] == [0, 1]
    assert summary["manifest"]["failures"] == []
    assert "config_sha256" in summary["manifest"]


def test_pour_zero_batches_initial_evaluation_only(tmp_path):
    code = main([
        "pour", "--objective", "task-oriented", "--seeds", "0",
        "--n-batches", "0", "--out", str(tmp_path),
    ])
    assert code == 0
    curve = (tmp_path / "curve.csv").read_text().splitlines()
    assert curve[0] == "seed,objective,batch,loss,p_e"
    assert len(curve) == 2
    assert curve[1].startswith("0,task-oriented,0,")


def test_curve_bytes_reproducible(tmp_path):
    args = ["lqr", "--seeds", "0", "--n-batches", "2",
            "--objective", "task-oriented"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "curve.csv").read_bytes() == (
        tmp_path / "b" / "curve.csv"
    ).read_bytes()


def test_summary_matches_curve_final_rows(tmp_path):
    main([
        "lqr", "--objective", "both", "--seeds", "0..1",
        "--n-batches", "2", "--out", str(tmp_path),
    ])
    summary = json.loads((tmp_path / "summary.json").read_text())
    finals = {}
    for line in (tmp_path / "curve.csv").read_text().splitlines()[1:]:
        seed, obj, batch, _, ratio = line.split(",")
        finals[(seed, obj)] = float(ratio)  # last row per key wins
    for obj, stats in summary["by_objective"].items():
        curve_mean = np.mean(
            [v for (s, o), v in finals.items() if o == obj]
        )
        assert abs(stats["mean_final_regret_ratio_test"] - curve_mean) <= 1e-9


def test_unknown_flag_rejected():
    assert main(["lqr", "--frobnicate"]) == 1


def test_bad_seed_range_rejected():
    assert main(["lqr", "--seeds", "a..b"]) == 1


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"not_a_key": 1}))
    assert main(["lqr", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_config_file_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_batches": 1, "eval_interval": 1}))
    code = main([
        "pour", "--objective", "task-oriented", "--seeds", "0",
        "--config", str(cfg), "--out", str(tmp_path),
    ])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config"]["params"]["n_batches"] == 1


def test_reps_simopt_cli_reports_distance(tmp_path):
    code = main([
        "reps-simopt", "--seed", "0", "--noiseless", "--out", str(tmp_path)
    ])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    (record,) = summary["results"]
    assert record["linf_reps_vs_closed_form"] >= 0.0
    assert len(record["theta_reps"]) == 6


def test_reps_simopt_prior_at_truth_recovers_theta():
    setup, dist, _, _ = make_lqr_setup(LQR_DEFAULTS)
    rng = np.random.default_rng(0)
    theta = np.clip(rng.normal(dist.mean, dist.std), -1.1, 1.1)
    system = setup.make_system(theta)
    policy = ExplorationPolicy(
        gains_ke=rng.normal(0, 0.1, size=(3, 6)),
        x0_explore=setup.basis_u @ np.ones(6),
        explore_horizon=4,
    )
    traj = rollout(system, policy, policy.x0_explore, 4, noiseless=True)
    prior = RepsState(mu_z=theta.copy(), sigma_z=0.09 * np.eye(6), eps_kl=1.0)
    theta_hat, stalled = reps_simopt(
        setup.basis_u, setup.input_b, traj, prior, iters=10,
        samples_per_iter=50, rng=np.random.default_rng(1),
    )
    assert not stalled
    assert np.abs(theta_hat - theta).max() <= 0.02


def test_reps_simopt_zero_trajectory_keeps_prior_mean():
    mu0 = np.array([0.5, -0.2])
    traj = Trajectory(
        x0=np.zeros(2), states=np.zeros((4, 2)),
        observations=np.zeros((5, 2)), actions=np.zeros((4, 2)),
    )
    prior = RepsState(mu_z=mu0.copy(), sigma_z=1e-4 * np.eye(2), eps_kl=1.0)
    theta_hat, _ = reps_simopt(
        np.eye(2), np.eye(2), traj, prior, iters=5, samples_per_iter=50,
        rng=np.random.default_rng(2),
    )
    # Constant reward keeps weights uniform; the mean only drifts by the
    # sample-mean noise of each iteration (about std / sqrt(50) per step).
    assert np.abs(theta_hat - mu0).max() <= 0.01


def test_reps_iteration_respects_kl_bound():
    setup, dist, _, _ = make_lqr_setup(LQR_DEFAULTS)
    rng = np.random.default_rng(3)
    theta = np.clip(rng.normal(dist.mean, dist.std), -1.1, 1.1)
    system = setup.make_system(theta)
    policy = ExplorationPolicy(
        gains_ke=rng.normal(0, 0.1, size=(3, 6)),
        x0_explore=setup.basis_u @ np.ones(6),
        explore_horizon=4,
    )
    traj = rollout(system, policy, policy.x0_explore, 4, noiseless=True)
    z = traj.observations @ setup.basis_u
    c = (traj.actions @ setup.input_b.T) @ setup.basis_u
    state = RepsState(mu_z=dist.mean.copy(), sigma_z=0.09 * np.eye(6), eps_kl=1.0)
    sampler = np.random.default_rng(4)
    for _ in range(10):
        cand = sampler.multivariate_normal(state.mu_z, state.sigma_z, size=50)
        resid = cand[:, None, :] * z[None, :-1, :] + c[None] - z[None, 1:, :]
        rewards = -(resid**2).sum(axis=(1, 2))
        eta = reps_solve_temperature(rewards, state.eps_kl)
        d = reps_weights(rewards, eta)
        p = d / d.sum()
        kl = float(np.sum(p * np.log(len(p) * p)))
        assert kl <= state.eps_kl + 0.1
        from taskexplore.optim import reps_update

        state, _ = reps_update(state, cand, rewards)


def test_run_experiment_rejects_unknown_experiment(tmp_path):
    cfg = ExperimentConfig(
        experiment="bogus", objective="both", seeds=[0], noiseless=False,
        params={}, output_dir=tmp_path,
    )
    with pytest.raises(ConfigError):
        run_experiment(cfg)
