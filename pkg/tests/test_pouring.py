"""Tests for the two-cup pouring environment and allocation training."""

import math

import numpy as np
import pytest

from taskexplore.pouring import (
    CupGeometry,
    PouringExplorationPolicy,
    PouringGoal,
    PouringTrainConfig,
    PouringWorld,
    evaluate_pouring_cost,
    pouring_episode,
    simulate_pour,
    tilt_angle,
    train_pouring,
    volume_at_tilt,
)


def test_tilt_full_cup_upright():
    geom = CupGeometry()
    assert tilt_angle(geom, geom.capacity) == pytest.approx(0.0)


def test_tilt_half_cup_clamps_at_bound():
    geom = CupGeometry()
    phi = tilt_angle(geom, geom.capacity / 2)
    assert phi == pytest.approx(geom.max_tilt, abs=2e-6)
    assert phi < math.atan(geom.height / (2 * geom.radius))


def test_tilt_direct_evaluation():
    geom = CupGeometry(radius=1.0, height=2.0)
    assert tilt_angle(geom, 1.5 * math.pi) == pytest.approx(
        math.atan(0.5), abs=1e-12
    )


def test_tilt_and_volume_are_inverses():
    geom = CupGeometry()
    for frac in np.linspace(0.51, 1.0, 20):
        v = frac * geom.capacity
        assert volume_at_tilt(geom, tilt_angle(geom, v)) == pytest.approx(
            v, abs=1e-10 * geom.capacity
        )


def test_pour_noiseless_exact_inversion():
    geom = CupGeometry()
    # Mass and goal chosen so the remaining volume stays above half the cup
    # (the interior regime of the tilt model).
    world = PouringWorld(masses=np.array([250.0, 200.0]))
    result = simulate_pour(geom, world, estimated_mass=250.0, goal_mass=50.0,
                           noiseless=True)
    assert result.poured == pytest.approx(50.0, abs=1e-10)
    assert result.cost == pytest.approx(0.0, abs=1e-10)


def test_pour_estimate_error_passes_through():
    geom = CupGeometry()
    world = PouringWorld(masses=np.array([250.0, 200.0]))
    result = simulate_pour(geom, world, estimated_mass=280.0, goal_mass=50.0,
                           noiseless=True)
    assert result.poured == pytest.approx(20.0, abs=1e-10)
    assert result.cost == pytest.approx(30.0, abs=1e-10)


def test_pour_infeasible_goal_clamps():
    geom = CupGeometry()
    # Asking to keep less than half the cup forces the tilt to its bound.
    mass = 300.0
    goal = mass - geom.density * geom.capacity / 2 + 40.0
    world = PouringWorld(masses=np.array([mass, 200.0]))
    result = simulate_pour(geom, world, estimated_mass=mass, goal_mass=goal,
                           noiseless=True)
    expected_poured = mass - geom.density * geom.capacity / 2
    assert result.poured == pytest.approx(expected_poured, rel=1e-4)
    assert result.cost == pytest.approx(goal - result.poured, abs=1e-10)


def test_episode_noiseless_zero_cost():
    geom = CupGeometry()
    world = PouringWorld(masses=np.array([280.0, 250.0]))
    goal = PouringGoal()
    for p_e in (0.1, 0.5, 0.9):
        policy = PouringExplorationPolicy(p_e=p_e)
        cost, estimates = pouring_episode(
            policy, world, geom, goal, np.random.default_rng(0), noiseless=True
        )
        assert cost == pytest.approx(0.0, abs=1e-10)
        np.testing.assert_allclose(estimates, world.masses)


def test_episode_allocation_counts_at_extremes():
    # With p_e = 1 the task cup is measured every remaining step, so its
    # estimate averages horizon - 1 = 5 draws and the distractor gets 1.
    geom = CupGeometry()
    goal = PouringGoal()
    rng = np.random.default_rng(1)
    n = 10_000
    est_task_p1 = np.empty(n)
    est_task_p0 = np.empty(n)
    world = PouringWorld(masses=np.array([200.0, 200.0]))
    for i in range(n):
        _, est1 = pouring_episode(
            PouringExplorationPolicy(p_e=1.0), world, geom, goal, rng
        )
        _, est0 = pouring_episode(
            PouringExplorationPolicy(p_e=0.0), world, geom, goal, rng
        )
        est_task_p1[i] = est1[0]
        est_task_p0[i] = est0[0]
    var5 = est_task_p1.var()
    var1 = est_task_p0.var()
    assert var1 / var5 == pytest.approx(5.0, rel=0.15)


def test_expected_cost_decreases_with_task_measurements():
    cfg = PouringTrainConfig.defaults()
    costs = [evaluate_pouring_cost(p, cfg, seed=2) for p in (0.1, 0.5, 0.9)]
    assert costs[0] > costs[1] > costs[2]


def test_noiseless_training_gradient_vanishes():
    cfg = PouringTrainConfig.defaults(n_batches=50)
    result = train_pouring("task_oriented", cfg, seed=3, noiseless=True)
    # Without noise the allocation probability is irrelevant, so p_e stays
    # near its initialization.
    assert abs(result.p_e - cfg.p_init) <= 0.05


def test_training_directional_separation():
    cfg = PouringTrainConfig.defaults(n_batches=300)
    oriented = [train_pouring("task_oriented", cfg, seed=s).p_e for s in range(5)]
    agnostic = [train_pouring("task_agnostic", cfg, seed=s).p_e for s in range(5)]
    assert np.mean(oriented) - np.mean(agnostic) >= 0.15


def test_training_deterministic():
    cfg = PouringTrainConfig.defaults(n_batches=20)
    a = train_pouring("task_oriented", cfg, seed=4)
    b = train_pouring("task_oriented", cfg, seed=4)
    assert a.p_e == b.p_e
    assert [(p.batch, p.loss, p.p_e) for p in a.curve] == [
        (p.batch, p.loss, p.p_e) for p in b.curve
    ]


def test_world_validation():
    with pytest.raises(ValueError):
        PouringWorld(masses=np.array([200.0, 200.0]), meas_noise_std=-1.0)
    with pytest.raises(ValueError):
        PouringWorld(masses=np.array([200.0, 200.0]), task_cup=2)


def test_geometry_holds_max_mass():
    geom = CupGeometry()
    assert geom.capacity * geom.density >= 300.0
