from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

from posoc.finite import (DegeneracyError, FiniteChain, backward_U_step,
                          bayes_jump, brute_force_value, exact_dp,
                          forward_belief_step, fully_observed_bound,
                          fully_observed_values, hamiltonian_continuous,
                          hamiltonian_discrete, lambda_jump, load_chain,
                          u_jump)

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


@pytest.fixture
def chain():
    return load_chain(SCENARIOS / "toy_chain.json")


def simple_chain(**overrides):
    doc = dict(
        generators=[[[-1.0, 1.0], [1.0, -1.0]]],
        running_costs=[[0.0, 1.0]],
        emissions=[[[0.8, 0.2], [0.2, 0.8]]],
        impulse_costs=[[0.1, 0.1]],
        terminal_costs=[0.0, 2.0],
        horizon=0.5, obs_times=(0.25,), dt=0.05,
    )
    doc.update(overrides)
    return FiniteChain(**doc)


def test_forward_belief_step_zero_generator():
    ch = simple_chain(generators=[[[0.0, 0.0], [0.0, 0.0]]])
    mu = np.array([0.3, 0.7])
    assert forward_belief_step(mu, 0, 0.05, ch) == pytest.approx(mu)


def test_forward_belief_step_stationary_limit():
    ch = simple_chain()
    mu = np.array([1.0, 0.0])
    for _ in range(2000):
        mu = forward_belief_step(mu, 0, 0.01, ch)
    assert mu == pytest.approx([0.5, 0.5], abs=1e-6)


def test_forward_belief_step_conserves_mass():
    ch = simple_chain()
    mu = forward_belief_step(np.array([0.9, 0.1]), 0, 0.05, ch)
    assert mu.sum() == 1.0
    assert np.all(mu >= 0)


def test_bayes_jump_uniform_likelihood():
    ch = simple_chain(emissions=[[[0.5, 0.5], [0.5, 0.5]]])
    mu = np.array([0.3, 0.7])
    post, L = bayes_jump(mu, 0, 0, ch)
    assert post == pytest.approx(mu)
    assert L == pytest.approx(0.5)


def test_bayes_jump_perfect_observation():
    ch = simple_chain(emissions=[[[1.0, 0.0], [0.0, 1.0]]])
    post, _ = bayes_jump(np.array([0.4, 0.6]), 0, 0, ch)
    assert post == pytest.approx([1.0, 0.0])


def test_bayes_jump_hand_case():
    post, L = bayes_jump(np.array([0.5, 0.5]), 0, 0, simple_chain())
    assert post == pytest.approx([0.8, 0.2])
    assert L == pytest.approx(0.5)


def test_bayes_jump_degeneracy():
    ch = simple_chain(emissions=[[[0.0, 1.0], [0.0, 1.0]]])
    with pytest.raises(DegeneracyError):
        bayes_jump(np.array([0.5, 0.5]), 0, 0, ch)


def test_backward_U_step_trivial():
    ch = simple_chain(generators=[[[0.0, 0.0], [0.0, 0.0]]],
                      running_costs=[[0.0, 0.0]])
    U = np.array([1.0, 2.0])
    assert backward_U_step(U, 0, 0.05, ch) == pytest.approx(U)


def test_backward_U_step_pure_running_cost():
    ch = simple_chain(generators=[[[0.0, 0.0], [0.0, 0.0]]],
                      running_costs=[[1.0, 1.0]])
    U = np.zeros(2)
    for _ in range(20):
        U = backward_U_step(U, 0, 0.05, ch)
    assert U == pytest.approx([1.0, 1.0], abs=1e-12)


def test_backward_U_step_matrix_exponential_oracle():
    ch = simple_chain()
    G = ch.generators[0]
    f = ch.running_costs[0]
    U_T = np.array([0.0, 2.0])
    t = 0.25
    for dt, steps in ((0.05, 5), (0.005, 50)):
        U = U_T.copy()
        for _ in range(steps):
            U = backward_U_step(U, 0, dt, ch)
        # U(t) = e^{Gt} U_T + int_0^t e^{Gs} f ds, integrated on a fine grid
        s = np.linspace(0.0, t, 2001)
        integ = np.trapezoid([expm(G * v) @ f for v in s], s, axis=0)
        exact = expm(G * t) @ U_T + integ
        assert np.abs(U - exact).max() <= 3.0 * dt


def test_u_jump_examples():
    ch = simple_chain()
    zero = np.zeros((2, 2))
    assert u_jump(zero, 0, ch) == pytest.approx([0.1, 0.1])
    const = np.array([[3.0, 3.0], [3.0, 3.0]])
    assert u_jump(const, 0, ch) == pytest.approx([3.1, 3.1])
    # hand sum: U_pre(s) = c(s) + sum_o U_post[o](s) pi(o|s)
    U_post = np.array([[1.0, 2.0], [3.0, 4.0]])  # indexed [symbol][state]
    got = u_jump(U_post, 0, ch)
    assert got == pytest.approx([0.1 + 1.0 * 0.8 + 3.0 * 0.2,
                                 0.1 + 2.0 * 0.2 + 4.0 * 0.8])


def test_lambda_jump_zero_continuation():
    ch = simple_chain()
    lam = lambda_jump(np.zeros((2, 2)), 0, np.array([0.5, 0.5]), ch)
    assert lam == pytest.approx([0.1, 0.1])


def test_lambda_jump_point_mass_prior():
    ch = simple_chain()
    lam_post = np.array([[1.3, -0.4], [0.2, 0.9]])
    lam = lambda_jump(lam_post, 0, np.array([1.0, 0.0]), ch)
    assert lam[0] == pytest.approx(0.1, abs=1e-12)


def test_lambda_jump_pairing_identity():
    rng = np.random.default_rng(4)
    ch = simple_chain()
    for _ in range(20):
        mu = rng.random(2)
        mu /= mu.sum()
        lam_post = rng.normal(size=(2, 2))
        lam = lambda_jump(lam_post, 0, mu, ch)
        assert float(lam @ mu) == pytest.approx(
            float(ch.impulse_costs[0] @ mu), abs=1e-12)


def test_hamiltonian_continuous():
    ch = simple_chain(
        generators=[[[-1.0, 1.0], [1.0, -1.0]], [[0.0, 0.0], [0.0, 0.0]]],
        running_costs=[[0.0, 1.0], [0.2, 0.2]],
    )
    mu = np.array([0.5, 0.5])
    U = np.array([0.0, 0.0])
    val, a = hamiltonian_continuous(mu, U, ch)
    # action 1 pays 0.2 everywhere, action 0 pays 0.5 on average
    assert (val, a) == (pytest.approx(0.2), 1)
    # ties break toward the first action
    ch_tie = simple_chain(
        generators=[[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]],
        running_costs=[[0.3, 0.3], [0.3, 0.3]],
    )
    _, a = hamiltonian_continuous(mu, U, ch_tie)
    assert a == 0


def test_hamiltonian_discrete():
    ch = simple_chain(
        emissions=[[[0.8, 0.2], [0.2, 0.8]], [[0.5, 0.5], [0.5, 0.5]]],
        impulse_costs=[[0.3, 0.3], [0.1, 0.1]],
    )
    mu = np.array([0.5, 0.5])
    val, b = hamiltonian_discrete(mu, np.zeros((2, 2)), ch)
    assert (val, b) == (pytest.approx(0.1), 1)
    # single observation control
    val1, b1 = hamiltonian_discrete(mu, np.zeros((2, 2)), simple_chain())
    assert (b1, val1) == (0, pytest.approx(0.1))


def test_exact_dp_zero_cost():
    ch = simple_chain(running_costs=[[0.0, 0.0]], impulse_costs=[[0.0, 0.0]],
                      terminal_costs=[0.0, 0.0])
    v, root = exact_dp(ch, np.array([0.5, 0.5]))
    assert v == pytest.approx(0.0, abs=1e-14)
    for node in root.walk():
        assert node.value == pytest.approx(0.0, abs=1e-14)


def test_exact_dp_no_observations():
    ch = simple_chain(obs_times=())
    v, _ = exact_dp(ch, np.array([0.5, 0.5]))
    assert v == pytest.approx(brute_force_value(ch, np.array([0.5, 0.5])),
                              abs=1e-12)


def test_exact_dp_matches_brute_force_on_shipped_instance(chain):
    mu0 = np.full(chain.n_states, 0.5)
    v, _ = exact_dp(chain, mu0)
    assert v == pytest.approx(brute_force_value(chain, mu0), abs=1e-10)


def test_envelope_identity(chain):
    _, root = exact_dp(chain, np.array([0.5, 0.5]))
    for node in root.walk():
        assert node.value == pytest.approx(float(node.U @ node.mu), abs=1e-10)


def test_fully_observed_bound(chain):
    _, root = exact_dp(chain, np.array([0.5, 0.5]))
    fo = fully_observed_values(chain)
    for node in root.walk():
        assert np.all(fo[node.slab] <= node.U + 1e-10)


def test_fully_observed_bound_is_slab_zero_entry(chain):
    assert np.array_equal(fully_observed_bound(chain),
                          fully_observed_values(chain)[0])


def test_chain_validation_rejects_bad_emissions():
    with pytest.raises(ValueError):
        simple_chain(emissions=[[[0.8, 0.3], [0.2, 0.8]]])
    with pytest.raises(ValueError):
        simple_chain(generators=[[[-1.0, 0.5], [1.0, -1.0]]])
    with pytest.raises(ValueError):
        simple_chain(dt=5.0)  # monotone Euler step violated
    with pytest.raises(ValueError):
        simple_chain(obs_times=(0.6,))  # outside (0, horizon)


def test_load_chain_round_trip(chain):
    assert chain.n_states == 2
    assert chain.n_actions == 2
    assert chain.n_obs_controls == 2
    assert chain.n_symbols == 2
    assert chain.obs_times == (0.25,)
