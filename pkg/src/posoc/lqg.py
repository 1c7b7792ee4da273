"""Closed-form LQG machinery: the backward control Riccati equation, the
fully observed benchmark value, the separation-principle controller
(Kalman estimate + certainty-equivalent LQR gain) and Monte Carlo policy
evaluation with confidence intervals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .model import ConfigurationError, ControlProblem, LqgSpec
from .filtering import GaussianBelief, kalman_predict, kalman_update
from .sde import TimeGrid, build_grid, simulate_batch

__all__ = [
    "RiccatiSolution",
    "riccati_solve",
    "fosoc_value",
    "SeparationPolicy",
    "separation_policy",
    "evaluate_policy_mc",
    "evaluate_policy_detailed",
    "EvalDetail",
]

RICCATI_DT = 1e-3


@dataclass(frozen=True)
class RiccatiSolution:
    grid: np.ndarray          # ascending time nodes on [0, T]
    S: np.ndarray             # (n, d_x, d_x)
    K_lqr: np.ndarray         # (n, d_alpha, d_x), R^{-1} B' S(t)

    def S_at(self, t: float) -> np.ndarray:
        return self._interp(self.S, t)

    def K_at(self, t: float) -> np.ndarray:
        return self._interp(self.K_lqr, t)

    def _interp(self, arr: np.ndarray, t: float) -> np.ndarray:
        g = self.grid
        t = min(max(t, g[0]), g[-1])
        i = int(np.searchsorted(g, t, side="right") - 1)
        if i >= len(g) - 1:
            return arr[-1]
        w = (t - g[i]) / (g[i + 1] - g[i])
        return (1 - w) * arr[i] + w * arr[i + 1]


def riccati_solve(A, B, Q, R, Q_T, T: float, dt: float = RICCATI_DT) -> RiccatiSolution:
    """Backward RK4 integration of -S' = A'S + SA - S B R^{-1} B' S + Q with
    S(T) = Q_T; gains K(t) = R^{-1} B' S(t) are filled on the same grid."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Q_T = np.atleast_2d(np.asarray(Q_T, dtype=float))
    try:
        R_inv = np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("control cost matrix R is singular") from exc
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    n = max(1, int(round(T / dt)))
    grid = np.linspace(0.0, T, n + 1)
    h = T / n
    S = np.empty((n + 1,) + A.shape)
    S[n] = Q_T

    def f(s):
        return -(A.T @ s + s @ A - s @ B @ R_inv @ B.T @ s + Q)

    for k in range(n, 0, -1):
        s = S[k]
        k1 = f(s)
        k2 = f(s - 0.5 * h * k1)
        k3 = f(s - 0.5 * h * k2)
        k4 = f(s - h * k3)
        s_new = s - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        S[k - 1] = 0.5 * (s_new + s_new.T)
    K = np.einsum("ab,bc,ncd->nad", R_inv, B.T, S)
    return RiccatiSolution(grid=grid, S=S, K_lqr=K)


def fosoc_value(spec: LqgSpec, T: float, ricc: RiccatiSolution) -> float:
    """Fully observed optimal expected cost:
    m0'S(0)m0/2 + tr(S(0) Sigma0)/2 + int tr(sigma sigma' S(t)) dt / 2."""
    S0 = ricc.S[0]
    sig2 = spec.sigma @ spec.sigma.T
    integrand = np.einsum("ij,nji->n", sig2, ricc.S)
    integral = np.trapezoid(integrand, ricc.grid)
    return float(0.5 * spec.m0 @ S0 @ spec.m0 + 0.5 * np.trace(S0 @ spec.Sigma0)
                 + 0.5 * integral)


class SeparationPolicy:
    """Certainty-equivalence controller for exogenous-observation LQG:
    a Kalman filter supplies the state estimate, the LQR gain acts on it.

    The covariance/gain schedule is data independent, so it is precomputed
    once per grid; only the means are tracked per trajectory.  The filter
    mean is advanced with the same Euler step as the plant so the applied
    (piecewise constant) control and the estimate stay consistent.
    """

    mode = "closed_form_lqg"
    window_K = 1

    def __init__(self, spec: LqgSpec, ricc: RiccatiSolution,
                 obs_times: Sequence[float], dt: float):
        if spec.fixed_eps is None:
            raise ConfigurationError(
                "separation principle requires exogenous observations "
                "(fixed_eps); beta as a decision variable has a dual effect")
        self.spec = spec
        self.ricc = ricc
        self.obs_times = tuple(obs_times)
        self.dt = dt
        self._gain_cache = {}

    # -- engine protocol -------------------------------------------------
    def begin(self, problem: ControlProblem, grid: TimeGrid, n_traj: int):
        spec = self.spec
        eps = float(spec.fixed_eps)
        R_y = np.diag(np.full(spec.dim_y, eps * eps))
        # precompute Kalman gains along this grid (shared across trajectories)
        gains = []
        P = GaussianBelief(np.zeros(spec.dim_x), spec.Sigma0)
        sig2 = spec.sigma @ spec.sigma.T
        for slab in range(grid.n_slabs):
            t0 = grid.times[grid.slab_start_nodes[slab]]
            t1 = grid.times[grid.slab_start_nodes[slab + 1]]
            P = kalman_predict(P, t0, t1, spec.A, spec.B, sig2, None, dt=self.dt)
            if slab < len(grid.obs_nodes):
                S = spec.C @ P.cov @ spec.C.T + R_y
                Kn = np.linalg.solve(S.T, (P.cov @ spec.C.T).T).T
                gains.append(Kn)
                P = kalman_update(P, np.zeros(spec.dim_y), spec.C, R_y)
        xhat = np.tile(spec.m0, (n_traj, 1))
        return {"xhat": xhat, "gains": gains}

    def alpha(self, k, t, windows, state):
        return -(state["xhat"] @ self.ricc.K_at(t).T)

    def advance(self, k, t, dt, alpha, state):
        spec = self.spec
        state["xhat"] = state["xhat"] + (state["xhat"] @ spec.A.T
                                         + np.atleast_2d(alpha) @ spec.B.T) * dt
        return state

    def beta(self, n, windows_pre, state):
        return np.full(self.spec.dim_y, float(self.spec.fixed_eps))

    def observe(self, n, y, beta, state):
        Kn = state["gains"][n]
        innov = y - state["xhat"] @ self.spec.C.T
        state["xhat"] = state["xhat"] + innov @ Kn.T
        return state

    # -- spec-facing callables -------------------------------------------
    def alpha_policy(self, t, xhat, z):
        return -np.asarray(xhat) @ self.ricc.K_at(t).T

    def beta_policy(self, n, z):
        return np.full(self.spec.dim_y, float(self.spec.fixed_eps))


def separation_policy(spec: LqgSpec, ricc: RiccatiSolution,
                      obs_times: Sequence[float], dt: float) -> SeparationPolicy:
    return SeparationPolicy(spec, ricc, obs_times, dt)


@dataclass
class EvalDetail:
    mean: float
    ci95: float
    n_eval: int
    grid: TimeGrid
    cost_to_go: np.ndarray        # mean remaining pathwise cost per grid node
    extra_mean: Optional[float] = None  # mean of the integrated extra statistic
    extra_ci95: Optional[float] = None


def evaluate_policy_mc(problem: ControlProblem, policy, M_eval: int, dt: float,
                       seed: int, chunk: int = 20000,
                       stream_start: int = 0) -> Tuple[float, float]:
    """Sample mean total cost over M_eval independent rollouts and the
    half-width of the 95% confidence interval (1.96 std / sqrt(M))."""
    d = evaluate_policy_detailed(problem, policy, M_eval, dt, seed,
                                 chunk=chunk, stream_start=stream_start)
    return d.mean, d.ci95


def evaluate_policy_detailed(problem: ControlProblem, policy, M_eval: int,
                             dt: float, seed: int, chunk: int = 20000,
                             stream_start: int = 0,
                             extra_step_stat: Optional[Callable] = None) -> EvalDetail:
    if M_eval < 2:
        raise ValueError("M_eval must be at least 2")
    grid = build_grid(problem.obs_times, problem.horizon, dt)
    total, total_sq, n_done = 0.0, 0.0, 0
    curve = np.zeros(len(grid.times))
    ex_sum, ex_sq = 0.0, 0.0
    while n_done < M_eval:
        m = min(chunk, M_eval - n_done)
        res = simulate_batch(problem, policy, grid, seed,
                             stream_start + n_done, m,
                             extra_step_stat=extra_step_stat)
        costs = res.total_costs
        total += costs.sum()
        total_sq += (costs * costs).sum()
        curve += res.remaining_costs().sum(axis=0)
        if extra_step_stat is not None:
            ex_sum += res.extra_stat.sum()
            ex_sq += (res.extra_stat * res.extra_stat).sum()
        n_done += m
    mean = total / M_eval
    var = max(total_sq / M_eval - mean * mean, 0.0)
    ci = 1.96 * np.sqrt(var / M_eval)
    detail = EvalDetail(mean=float(mean), ci95=float(ci), n_eval=M_eval,
                        grid=grid, cost_to_go=curve / M_eval)
    if extra_step_stat is not None:
        em = ex_sum / M_eval
        ev = max(ex_sq / M_eval - em * em, 0.0)
        detail.extra_mean = float(em)
        detail.extra_ci95 = float(1.96 * np.sqrt(ev / M_eval))
    return detail
