"""Belief representations: weighted particle ensembles with Bayes reweighting
and systematic resampling, plus the exact Gaussian filter (continuous-time
prediction, discrete measurement updates) for linear problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import logsumexp

from .model import ControlProblem
from .sde import RngStream, em_step

__all__ = [
    "DegeneracyError",
    "ParticleEnsemble",
    "GaussianBelief",
    "propagate_ensemble",
    "bayes_reweight",
    "effective_sample_size",
    "systematic_resample",
    "kalman_predict",
    "kalman_update",
]


class DegeneracyError(RuntimeError):
    """All particle likelihoods vanished; the observation is incompatible."""


@dataclass
class ParticleEnsemble:
    """M weighted samples approximating the belief.

    Each particle owns a random stream ``(seed, stream_id)`` consumed in the
    same order as a single-trajectory rollout, so a one-particle ensemble
    reproduces the rollout path on the same stream.
    """

    states: np.ndarray          # (M, d_x)
    weights: np.ndarray         # (M,)
    stream_ids: np.ndarray      # (M,)
    seed: int = 0
    _generators: Optional[List[np.random.Generator]] = field(default=None, repr=False)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.states):
            raise ValueError("states/weights length mismatch")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")

    @classmethod
    def from_initial(cls, problem: ControlProblem, seed: int, M: int,
                     stream_start: int = 0) -> "ParticleEnsemble":
        gens = [RngStream(seed, stream_start + m).generator() for m in range(M)]
        states = np.vstack([problem.initial_sampler(g, 1) for g in gens])
        e = cls(states=states, weights=np.full(M, 1.0 / M),
                stream_ids=np.arange(stream_start, stream_start + M), seed=seed)
        e._generators = gens
        return e

    @property
    def size(self) -> int:
        return len(self.weights)

    def generators(self) -> List[np.random.Generator]:
        if self._generators is None:
            self._generators = [RngStream(self.seed, int(s)).generator()
                                for s in self.stream_ids]
        return self._generators

    def normalized(self) -> "ParticleEnsemble":
        s = self.weights.sum()
        if s <= 0:
            raise DegeneracyError("total weight is zero")
        e = ParticleEnsemble(self.states, self.weights / s, self.stream_ids, self.seed)
        e._generators = self._generators
        return e

    def mean(self) -> np.ndarray:
        return self.weights @ self.states

    def cov(self) -> np.ndarray:
        d = self.states - self.mean()
        return (d * self.weights[:, None]).T @ d


def propagate_ensemble(e: ParticleEnsemble, alpha_of: Callable, window,
                       t0: float, t1: float, dt: float,
                       problem: ControlProblem) -> ParticleEnsemble:
    """Advance every particle through [t0, t1] by Euler-Maruyama under the
    feedback ``alpha_of(t, states, window)``; weights are unchanged."""
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    steps = max(1, int(round((t1 - t0) / dt)))
    h = (t1 - t0) / steps
    gens = e.generators()
    M = e.size
    noise = np.empty((M, steps, problem.dim_w))
    for m, g in enumerate(gens):
        noise[m] = g.standard_normal((steps, problem.dim_w))
    x = e.states
    for j in range(steps):
        t = t0 + j * h
        a = np.asarray(alpha_of(t, x, window), dtype=float)
        a = np.broadcast_to(np.atleast_2d(a), (M, problem.dim_alpha))
        a = problem.clip_alpha(a)
        x = em_step(x, t, a, h, noise[:, j], problem)
    out = ParticleEnsemble(x, e.weights, e.stream_ids, e.seed)
    out._generators = gens
    return out


def bayes_reweight(e: ParticleEnsemble, y: np.ndarray, beta: np.ndarray,
                   obs_index: int, problem: ControlProblem):
    """Multiply weights by the observation likelihood and renormalize.

    Returns ``(posterior, log_L)`` where log_L = log sum_m w_m pi(y|x_m, beta)
    is the log predictive normalizer.  Likelihoods are handled in log space
    with a max shift, so very small noise levels do not underflow.
    """
    logpi = np.asarray(problem.likelihood_logdensity(y, e.states, beta, obs_index))
    logw = np.where(e.weights > 0, np.log(np.maximum(e.weights, 1e-300)), -np.inf)
    log_l = float(logsumexp(logw + logpi))
    if not np.isfinite(log_l):
        raise DegeneracyError(
            f"all particle likelihoods vanished at observation {obs_index}")
    shifted = logw + logpi - np.max(logw + logpi)
    w = np.exp(shifted)
    w /= w.sum()
    out = ParticleEnsemble(e.states, w, e.stream_ids, e.seed)
    out._generators = e._generators
    return out, log_l


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_resample(e: ParticleEnsemble, rng: RngStream) -> ParticleEnsemble:
    """Low-variance resampling: one uniform offset, M equally spaced strata."""
    M = e.size
    u = (rng.generator().random() + np.arange(M)) / M
    idx = np.searchsorted(np.cumsum(e.weights), u, side="left")
    idx = np.minimum(idx, M - 1)
    # fresh streams for the resampled particles
    new_ids = int(e.stream_ids.max()) + 1 + np.arange(M)
    out = ParticleEnsemble(e.states[idx], np.full(M, 1.0 / M), new_ids, e.seed)
    return out


@dataclass
class GaussianBelief:
    """Kalman mean/covariance pair."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-10:
            raise ValueError("covariance must be positive semidefinite")


def kalman_predict(b: GaussianBelief, t0: float, t1: float, A: np.ndarray,
                   B: np.ndarray, Sigma: np.ndarray,
                   alpha_path: Optional[Callable] = None,
                   dt: float = 1e-3) -> GaussianBelief:
    """Integrate the mean ODE dm = (Am + B alpha)dt and the Lyapunov equation
    dP = (AP + PA' + Sigma)dt with RK4; the covariance is symmetrized each step."""
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    steps = max(1, int(round((t1 - t0) / dt)))
    h = (t1 - t0) / steps
    m, P = b.mean.copy(), b.cov.copy()

    def u(t):
        if alpha_path is None:
            return np.zeros(B.shape[1])
        return np.atleast_1d(np.asarray(alpha_path(t), dtype=float))

    def f_mean(t, m):
        return A @ m + B @ u(t)

    def f_cov(P):
        return A @ P + P @ A.T + Sigma

    for j in range(steps):
        t = t0 + j * h
        k1 = f_mean(t, m)
        k2 = f_mean(t + h / 2, m + h / 2 * k1)
        k3 = f_mean(t + h / 2, m + h / 2 * k2)
        k4 = f_mean(t + h, m + h * k3)
        m = m + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        K1 = f_cov(P)
        K2 = f_cov(P + h / 2 * K1)
        K3 = f_cov(P + h / 2 * K2)
        K4 = f_cov(P + h * K3)
        P = P + h / 6 * (K1 + 2 * K2 + 2 * K3 + K4)
        P = 0.5 * (P + P.T)
    return GaussianBelief(mean=m, cov=P)


def kalman_update(b: GaussianBelief, y: np.ndarray, C: np.ndarray,
                  R_y: np.ndarray) -> GaussianBelief:
    """Discrete measurement update with gain K = P C'(C P C' + R_y)^{-1}."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    R_y = np.atleast_2d(np.asarray(R_y, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    P = b.cov
    S = C @ P @ C.T + R_y
    try:
        K = np.linalg.solve(S.T, (P @ C.T).T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular innovation covariance: {exc}") from exc
    m = b.mean + K @ (y - C @ b.mean)
    P_new = (np.eye(len(b.mean)) - K @ C) @ P
    P_new = 0.5 * (P_new + P_new.T)
    return GaussianBelief(mean=m, cov=P_new)
