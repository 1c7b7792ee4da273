import math

import numpy as np
import pytest

from posoc.filtering import (DegeneracyError, GaussianBelief, ParticleEnsemble,
                             bayes_reweight, effective_sample_size,
                             kalman_predict, kalman_update, propagate_ensemble,
                             systematic_resample)
from posoc.model import make_lqg_problem
from posoc.sde import RngStream


def two_particles(x0=0.0, x1=1.0):
    return ParticleEnsemble(states=np.array([[x0], [x1]]),
                            weights=np.array([0.5, 0.5]),
                            stream_ids=np.array([0, 1]))


@pytest.fixture
def lqg_problem(table1_spec):
    return make_lqg_problem(table1_spec, (0.25, 0.5, 0.75), 1.0)


def test_bayes_reweight_symmetry(lqg_problem):
    post, _ = bayes_reweight(two_particles(), np.array([0.5]),
                             np.array([1.0]), 0, lqg_problem)
    assert post.weights == pytest.approx([0.5, 0.5], abs=1e-15)


def test_bayes_reweight_hand_case(lqg_problem):
    post, log_l = bayes_reweight(two_particles(), np.array([0.0]),
                                 np.array([1.0]), 0, lqg_problem)
    w1 = math.exp(-0.5) / (1.0 + math.exp(-0.5))
    assert post.weights == pytest.approx([1.0 - w1, w1], abs=1e-12)
    assert post.weights == pytest.approx([0.6225, 0.3775], abs=5e-5)
    # predictive normalizer: average of the two Gaussian densities at y=0
    dens = 0.5 * (1.0 + math.exp(-0.5)) / math.sqrt(2 * math.pi)
    assert log_l == pytest.approx(math.log(dens), abs=1e-12)


def test_bayes_reweight_conserves_mass(lqg_problem):
    rng = np.random.default_rng(0)
    e = ParticleEnsemble(states=rng.normal(size=(200, 1)),
                         weights=np.full(200, 1.0 / 200),
                         stream_ids=np.arange(200))
    post, _ = bayes_reweight(e, np.array([0.7]), np.array([0.1]), 0, lqg_problem)
    assert post.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(post.weights >= 0)


def test_bayes_reweight_degeneracy(lqg_problem):
    with np.errstate(over="ignore"), pytest.raises(DegeneracyError):
        bayes_reweight(two_particles(), np.array([0.5]),
                       np.array([1e-200]), 0, lqg_problem)


def test_effective_sample_size():
    assert effective_sample_size(np.full(100, 0.01)) == pytest.approx(100.0)
    w = np.zeros(10)
    w[3] = 1.0
    assert effective_sample_size(w) == pytest.approx(1.0)
    assert effective_sample_size(np.array([0.5, 0.25, 0.25])) == \
        pytest.approx(1.0 / 0.375)


def test_systematic_resample_uniform_identity():
    e = ParticleEnsemble(states=np.arange(8.0)[:, None],
                         weights=np.full(8, 0.125),
                         stream_ids=np.arange(8))
    out = systematic_resample(e, RngStream(5, 0))
    assert sorted(out.states[:, 0]) == pytest.approx(list(range(8)))
    assert out.weights == pytest.approx(np.full(8, 0.125))


def test_systematic_resample_point_mass():
    w = np.zeros(6)
    w[2] = 1.0
    e = ParticleEnsemble(states=np.arange(6.0)[:, None], weights=w,
                         stream_ids=np.arange(6))
    out = systematic_resample(e, RngStream(0, 0))
    assert np.all(out.states == 2.0)


def test_systematic_resample_counts_7_3():
    # ten particles carrying weights (0.7, 0.3) over two support points draw
    # exactly (7, 3) copies for every offset
    states = np.repeat(np.array([[0.0], [1.0]]), 5, axis=0)
    w = np.where(states[:, 0] == 0.0, 0.14, 0.06)
    e = ParticleEnsemble(states=states, weights=w, stream_ids=np.arange(10))
    for k in range(20):
        out = systematic_resample(e, RngStream(42, k))
        n_zero = int(np.sum(out.states[:, 0] == 0.0))
        assert (n_zero, 10 - n_zero) == (7, 3)


def test_resample_preserves_mean_on_average():
    rng = np.random.default_rng(2)
    states = rng.normal(size=(50, 1))
    w = rng.random(50)
    w /= w.sum()
    e = ParticleEnsemble(states=states, weights=w, stream_ids=np.arange(50))
    target = float(w @ states[:, 0])
    reps = 1000
    means = [systematic_resample(e, RngStream(7, k)).states[:, 0].mean()
             for k in range(reps)]
    std_w = math.sqrt(float(w @ (states[:, 0] - target) ** 2))
    assert abs(np.mean(means) - target) <= 4 * std_w / math.sqrt(50 * reps)


def test_propagate_no_dynamics(table1_spec, lqg_problem):
    from posoc.model import LqgSpec
    spec = LqgSpec(A=np.array([[0.0]]), B=np.array([[0.0]]),
                   C=np.array([[1.0]]), sigma=np.array([[0.0]]),
                   Q=np.array([[0.0]]), R=np.array([[1.0]]),
                   Q_T=np.array([[0.0]]), m0=np.zeros(1),
                   Sigma0=np.array([[1.0]]), fixed_eps=0.1)
    prob = make_lqg_problem(spec, (), 1.0)
    e = two_particles()
    out = propagate_ensemble(e, lambda t, x, z: np.zeros((len(x), 1)), None,
                             0.0, 0.5, 0.01, prob)
    assert np.array_equal(out.states, e.states)
    assert np.array_equal(out.weights, e.weights)


def test_propagate_matches_kalman_predict(table1_spec, lqg_problem):
    spec = table1_spec
    M = 20000
    e = ParticleEnsemble.from_initial(lqg_problem, seed=31, M=M)
    out = propagate_ensemble(e, lambda t, x, z: np.zeros((len(x), 1)), None,
                             0.0, 0.25, 0.01, lqg_problem)
    b = kalman_predict(GaussianBelief(spec.m0.copy(), spec.Sigma0.copy()),
                       0.0, 0.25, spec.A, spec.B, spec.sigma @ spec.sigma.T,
                       lambda t: np.zeros(1), 0.01)
    band = 4.0 / math.sqrt(M)
    assert abs(out.mean()[0] - b.mean[0]) <= band
    assert abs(out.cov()[0, 0] - b.cov[0, 0]) <= band


def test_kalman_predict_trivial():
    b = GaussianBelief(np.array([1.0]), np.array([[2.0]]))
    out = kalman_predict(b, 0.0, 1.0, np.zeros((1, 1)), np.zeros((1, 1)),
                         np.zeros((1, 1)), lambda t: np.zeros(1), 0.01)
    assert out.mean[0] == pytest.approx(1.0, abs=1e-12)
    assert out.cov[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_kalman_predict_pure_diffusion():
    b = GaussianBelief(np.zeros(2), np.eye(2))
    out = kalman_predict(b, 0.0, 1.0, np.zeros((2, 2)), np.zeros((2, 1)),
                         np.eye(2), lambda t: np.zeros(1), 0.01)
    assert out.cov == pytest.approx(2.0 * np.eye(2), abs=1e-10)


def test_kalman_predict_lyapunov_closed_form():
    A = -0.25
    out = kalman_predict(GaussianBelief(np.zeros(1), np.zeros((1, 1))),
                         0.0, 0.5, np.array([[A]]), np.zeros((1, 1)),
                         np.array([[0.25]]), lambda t: np.zeros(1), 1e-3)
    closed = 0.25 * (1.0 - math.exp(2 * A * 0.5)) / (-2 * A)
    assert out.cov[0, 0] == pytest.approx(closed, abs=1e-8)
    assert closed == pytest.approx(0.110600, abs=5e-7)


def test_kalman_update_uninformative():
    b = GaussianBelief(np.array([0.3]), np.array([[1.0]]))
    out = kalman_update(b, np.array([5.0]), np.eye(1), 1e12 * np.eye(1))
    assert abs(out.mean[0] - 0.3) <= 1e-6


def test_kalman_update_perfect_observation():
    b = GaussianBelief(np.array([0.0]), np.array([[1.0]]))
    out = kalman_update(b, np.array([2.5]), np.eye(1), np.zeros((1, 1)))
    assert out.mean[0] == pytest.approx(2.5, abs=1e-12)
    assert out.cov[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_kalman_update_hand_case():
    b = GaussianBelief(np.array([0.0]), np.array([[1.0]]))
    out = kalman_update(b, np.array([2.0]), np.eye(1), np.eye(1))
    assert out.mean[0] == pytest.approx(1.0, abs=1e-12)
    assert out.cov[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_predictive_likelihood_matches_kalman(table1_spec, lqg_problem):
    # product of particle normalizers vs the Kalman innovation likelihood
    spec = table1_spec
    M = 100000
    eps = 0.3
    ys = [np.array([0.2]), np.array([-0.4]), np.array([0.6])]
    e = ParticleEnsemble.from_initial(lqg_problem, seed=13, M=M)
    kb = GaussianBelief(spec.m0.copy(), spec.Sigma0.copy())
    log_l_pf = 0.0
    log_l_kf = 0.0
    t_prev = 0.0
    for n, tn in enumerate((0.25, 0.5, 0.75)):
        e = propagate_ensemble(e, lambda t, x, z: np.zeros((len(x), 1)), None,
                               t_prev, tn, 0.01, lqg_problem)
        kb = kalman_predict(kb, t_prev, tn, spec.A, spec.B,
                            spec.sigma @ spec.sigma.T,
                            lambda t: np.zeros(1), 0.01)
        e, log_l = bayes_reweight(e, ys[n], np.array([eps]), n, lqg_problem)
        log_l_pf += log_l
        s2 = kb.cov[0, 0] + eps * eps
        log_l_kf += -0.5 * (ys[n][0] - kb.mean[0]) ** 2 / s2 \
            - 0.5 * math.log(2 * math.pi * s2)
        kb = kalman_update(kb, ys[n], spec.C, eps * eps * np.eye(1))
        if effective_sample_size(e.weights) < M / 2:
            e = systematic_resample(e, RngStream(77, n))
        t_prev = tn
    assert abs(log_l_pf - log_l_kf) / abs(log_l_kf) <= 1e-2
