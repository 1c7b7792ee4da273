import math

import numpy as np
import pytest

from posoc.lqg import evaluate_policy_mc
from posoc.model import LqgSpec, make_lqg_problem
from posoc.sde import (PropagationError, RngStream, build_grid, em_step,
                       rollout, simulate_batch)
from posoc.solver import zero_policy


def scalar_lqg(A=-0.25, sigma=0.5, Sigma0=1.0, Q=2.0, Q_T=2.0,
               obs_times=(), eps=0.1):
    spec = LqgSpec(
        A=np.array([[A]]), B=np.array([[1.0]]), C=np.array([[1.0]]),
        sigma=np.array([[sigma]]), Q=np.array([[Q]]), R=np.array([[2.0]]),
        Q_T=np.array([[Q_T]]), m0=np.zeros(1), Sigma0=np.array([[Sigma0]]),
        fixed_eps=eps,
    )
    return make_lqg_problem(spec, obs_times, 1.0)


def test_em_step_no_dynamics():
    prob = scalar_lqg(A=0.0, sigma=0.0)
    x = np.array([[3.7]])
    out = em_step(x, 0.0, np.array([[0.0]]), 0.01, np.array([[1.3]]), prob)
    assert out[0, 0] == 3.7


def test_em_step_pure_drift():
    # drift 1 comes from B * alpha with A = 0
    prob = scalar_lqg(A=0.0, sigma=0.0)
    out = em_step(np.array([[2.0]]), 0.0, np.array([[1.0]]), 0.01,
                  np.array([[0.0]]), prob)
    assert out[0, 0] == pytest.approx(2.01, abs=1e-15)


def test_em_step_hand_case():
    prob = scalar_lqg()
    out = em_step(np.array([[4.0]]), 0.0, np.array([[0.0]]), 0.1,
                  np.array([[1.0]]), prob)
    expected = 4.0 - 0.1 + 0.5 * math.sqrt(0.1)
    assert out[0, 0] == pytest.approx(expected, abs=1e-12)
    assert out[0, 0] == pytest.approx(4.05811, abs=5e-6)


def test_em_step_rejects_bad_dt():
    prob = scalar_lqg()
    with pytest.raises(ValueError):
        em_step(np.array([[0.0]]), 0.0, np.array([[0.0]]), 0.0,
                np.array([[0.0]]), prob)


def test_em_step_overflow_raises():
    prob = scalar_lqg(A=1e3, sigma=0.0)
    with np.errstate(over="ignore"), pytest.raises(PropagationError):
        em_step(np.array([[1.7e308]]), 0.0, np.array([[0.0]]), 1.0,
                np.array([[0.0]]), prob)


def test_rng_stream_repeatable():
    a = RngStream(7, 3).generator().standard_normal(5)
    b = RngStream(7, 3).generator().standard_normal(5)
    c = RngStream(7, 4).generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_grid_contains_observation_times():
    grid = build_grid((0.25, 0.5, 0.75), 1.0, 0.01)
    for t in (0.25, 0.5, 0.75):
        assert np.isclose(grid.times, t).any()
    assert grid.times[0] == 0.0 and grid.times[-1] == 1.0
    assert np.all(np.diff(grid.times) > 0)


def test_rollout_determinism():
    prob = scalar_lqg(obs_times=(0.5,))
    pol = zero_policy(prob)
    r1 = rollout(prob, pol, 0.01, RngStream(11, 0))
    r2 = rollout(prob, pol, 0.01, RngStream(11, 0))
    assert np.array_equal(r1.states, r2.states)
    assert r1.total_cost == r2.total_cost


def test_rollout_cost_decomposition():
    prob = scalar_lqg(obs_times=(0.5,))
    r = rollout(prob, zero_policy(prob), 0.01, RngStream(1, 5))
    total = r.stage_costs.sum() + r.impulse_costs.sum() + r.terminal_cost_value
    assert r.total_cost == total
    assert len(r.states) == len(r.times)


def test_no_observations_means_no_impulses():
    prob = scalar_lqg(obs_times=())
    r = rollout(prob, zero_policy(prob), 0.01, RngStream(1, 0))
    assert r.observations.size == 0
    assert r.impulse_costs.size == 0


def test_simulate_batch_matches_chunked_streams():
    prob = scalar_lqg(obs_times=(0.5,))
    pol = zero_policy(prob)
    grid = build_grid(prob.obs_times, prob.horizon, 0.01)
    full = simulate_batch(prob, pol, grid, 3, 0, 10)
    head = simulate_batch(prob, pol, grid, 3, 0, 6)
    tail = simulate_batch(prob, pol, grid, 3, 6, 4)
    assert np.array_equal(full.total_costs,
                          np.concatenate([head.total_costs, tail.total_costs]))


def test_batch_matches_single_rollout():
    prob = scalar_lqg(obs_times=(0.5,))
    pol = zero_policy(prob)
    grid = build_grid(prob.obs_times, prob.horizon, 0.01)
    res = simulate_batch(prob, pol, grid, 9, 4, 1, record_states=True)
    r = rollout(prob, pol, 0.01, RngStream(9, 4))
    assert np.allclose(res.states[0], r.states)
    assert res.total_costs[0] == pytest.approx(r.total_cost, abs=1e-12)


def test_uncontrolled_ou_moments():
    # mean and variance at T against the closed forms for dX = AX dt + s dW
    A, s, S0, T, M = -0.25, 0.5, 1.0, 1.0, 40000
    prob = scalar_lqg(obs_times=())
    grid = build_grid((), 1.0, 0.01)
    res = simulate_batch(prob, zero_policy(prob), grid, 17, 0, M,
                         record_states=True)
    xT = res.states[:, -1, 0]
    var_T = S0 * math.exp(2 * A * T) + s * s * (math.exp(2 * A * T) - 1) / (2 * A)
    assert abs(xT.mean()) <= 4 * math.sqrt(var_T / M)
    se_var = xT.var() * math.sqrt(2.0 / M)
    assert abs(xT.var() - var_T) <= 4 * se_var


def test_uncontrolled_ou_cost_oracle():
    # mean rollout cost against the analytic second-moment integral
    A, s, S0, Q, Q_T, T = -0.25, 0.5, 1.0, 2.0, 2.0, 1.0
    prob = scalar_lqg(obs_times=())

    def ex2(t):
        return S0 * math.exp(2 * A * t) + s * s * (math.exp(2 * A * t) - 1) / (2 * A)

    ts = np.linspace(0.0, T, 2001)
    analytic = 0.5 * Q * np.trapezoid([ex2(t) for t in ts], ts) \
        + 0.5 * Q_T * ex2(T)
    mean, ci = evaluate_policy_mc(prob, zero_policy(prob), 20000, 0.01, seed=29)
    se = ci / 1.96
    assert abs(mean - analytic) <= 3 * se + 0.01  # small dt bias allowance


def test_deterministic_problem_zero_ci():
    prob = scalar_lqg(sigma=0.0, Sigma0=0.0, obs_times=())
    mean, ci = evaluate_policy_mc(prob, zero_policy(prob), 16, 0.01, seed=0)
    assert ci == 0.0
    assert mean == pytest.approx(0.0, abs=1e-12)
