"""Problem definitions: generic partially observed control problems, the
linear-quadratic-Gaussian (LQG) family, obstacle-penalty variants, and the
sliding observation window.

All model callables are written batch-first: the state argument ``x`` may be a
single vector of shape ``(d_x,)`` or a batch ``(M, d_x)``, and outputs
broadcast accordingly.  Problem objects are immutable after construction and
safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ConfigurationError",
    "ControlProblem",
    "LqgSpec",
    "ObstacleSpec",
    "WindowState",
    "make_lqg_problem",
    "make_obstacle_problem",
    "observation_cost",
    "obstacle_penalty",
    "window_update",
    "uniform_obs_times",
]


class ConfigurationError(ValueError):
    """Raised when a problem specification is internally inconsistent."""


def _as_matrix(name: str, m, rows: int, cols: int) -> np.ndarray:
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.shape != (rows, cols):
        raise ConfigurationError(f"{name} must have shape ({rows}, {cols}), got {a.shape}")
    return a


def _check_psd(name: str, m: np.ndarray, strict: bool = False, tol: float = 1e-10) -> None:
    if not np.allclose(m, m.T, atol=tol):
        raise ConfigurationError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    if strict:
        if eig.min() <= tol:
            raise ConfigurationError(f"{name} must be positive definite (min eig {eig.min():g})")
    elif eig.min() < -tol:
        raise ConfigurationError(f"{name} must be positive semidefinite (min eig {eig.min():g})")


@dataclass(frozen=True)
class ControlProblem:
    """A partially observed stochastic control problem.

    Between observations the state follows ``dX = drift dt + diffusion dW``;
    at each observation time an observation is drawn from the likelihood
    parametrized by the discrete control ``beta``, and the impulse cost is
    charged.  Costs accumulate as running + impulse + terminal.
    """

    dim_x: int
    dim_alpha: int
    dim_beta: int
    dim_y: int
    dim_w: int
    horizon: float
    obs_times: tuple
    drift: Callable  # (t, x, alpha) -> (.., d_x)
    diffusion: Callable  # (t, x, alpha) -> (d_x, d_w), state-independent diffusion may return a constant matrix
    likelihood_logdensity: Callable  # (y, x, beta, n) -> scalar or (M,)
    observation_sampler: Callable  # (x, beta, n, xi) -> (.., d_y)
    running_cost: Callable  # (t, x, alpha) -> scalar or (M,)
    impulse_cost: Callable  # (n, x, beta) -> scalar or (M,)
    terminal_cost: Callable  # (x) -> scalar or (M,)
    initial_sampler: Callable  # (rng, size) -> (size, d_x)
    initial_mean: Optional[np.ndarray] = None
    initial_cov: Optional[np.ndarray] = None
    alpha_low: Optional[np.ndarray] = None  # box bounds; None means unbounded
    alpha_high: Optional[np.ndarray] = None
    alpha_grid: Optional[np.ndarray] = None  # finite candidates, shape (n_cand, d_alpha)
    beta_grid: Optional[np.ndarray] = None  # finite candidates, shape (n_cand, d_beta)
    fixed_beta: Optional[np.ndarray] = None  # exogenous observation channel
    # quadratic control-cost structure, set when the closed-form alpha
    # minimizer -R^{-1} B^T grad p is valid (cost quadratic in alpha,
    # drift affine in alpha)
    control_matrix: Optional[np.ndarray] = None  # B, (d_x, d_alpha)
    control_cost: Optional[np.ndarray] = None  # R, (d_alpha, d_alpha)
    lqg: Optional["LqgSpec"] = None
    obstacle: Optional["ObstacleSpec"] = None

    def __post_init__(self):
        ts = tuple(float(t) for t in self.obs_times)
        if any(t2 <= t1 for t1, t2 in zip(ts, ts[1:])):
            raise ConfigurationError("obs_times must be strictly increasing")
        if ts and not (0.0 < ts[0] and ts[-1] < self.horizon):
            raise ConfigurationError("obs_times must lie in the open interval (0, horizon)")
        object.__setattr__(self, "obs_times", ts)

    @property
    def n_obs(self) -> int:
        return len(self.obs_times)

    def clip_alpha(self, alpha: np.ndarray) -> np.ndarray:
        if self.alpha_low is None and self.alpha_high is None:
            return alpha
        return np.clip(alpha, self.alpha_low, self.alpha_high)


@dataclass(frozen=True)
class LqgSpec:
    """Linear dynamics, Gaussian observations, quadratic costs.

    ``kappa[n]`` weights the per-channel observation cost sum(kappa/beta) at
    the n-th observation.  ``fixed_eps`` fixes the observation noise level,
    making the information exogenous (separation principle applies).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    sigma: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray
    kappa: Optional[np.ndarray] = None  # (N_o, d_y)
    fixed_eps: Optional[float] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d_x = A.shape[0]
        if A.shape != (d_x, d_x):
            raise ConfigurationError("A must be square")
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.shape[0] != d_x:
            raise ConfigurationError("B row dimension must match A")
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[1] != d_x:
            raise ConfigurationError("C column dimension must match A")
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape[0] != d_x:
            raise ConfigurationError("sigma row dimension must match A")
        Q = _as_matrix("Q", self.Q, d_x, d_x)
        Q_T = _as_matrix("Q_T", self.Q_T, d_x, d_x)
        d_a = B.shape[1]
        R = _as_matrix("R", self.R, d_a, d_a)
        _check_psd("Q", Q)
        _check_psd("Q_T", Q_T)
        _check_psd("R", R, strict=True)
        m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        if m0.shape != (d_x,):
            raise ConfigurationError("m0 dimension mismatch")
        Sigma0 = _as_matrix("Sigma0", self.Sigma0, d_x, d_x)
        _check_psd("Sigma0", Sigma0)
        kappa = self.kappa
        if kappa is not None:
            kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
            if kappa.shape[1] != C.shape[0]:
                raise ConfigurationError("kappa channel dimension must match d_y")
            if self.fixed_eps is None and np.any(kappa <= 0):
                raise ConfigurationError("kappa must be strictly positive when beta is a decision")
        for name, val in [("A", A), ("B", B), ("C", C), ("sigma", sigma), ("Q", Q),
                          ("R", R), ("Q_T", Q_T), ("m0", m0), ("Sigma0", Sigma0),
                          ("kappa", kappa)]:
            object.__setattr__(self, name, val)

    @property
    def dim_x(self) -> int:
        return self.A.shape[0]

    @property
    def dim_alpha(self) -> int:
        return self.B.shape[1]

    @property
    def dim_y(self) -> int:
        return self.C.shape[0]

    @property
    def dim_w(self) -> int:
        return self.sigma.shape[1]


@dataclass(frozen=True)
class ObstacleSpec:
    """Time-gated spherical-shell penalty added to quadratic regulation costs."""

    t_min: float
    t_max: float
    r_in: float
    r_out: float
    magnitude: float
    x_star: np.ndarray
    Q: np.ndarray
    Q_T: np.ndarray
    R: np.ndarray
    sigma: np.ndarray
    C: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray
    fixed_eps: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max):
            raise ConfigurationError("need 0 <= t_min < t_max")
        if not (0.0 <= self.r_in < self.r_out):
            raise ConfigurationError("need 0 <= r_in < r_out")
        if self.magnitude < 0:
            raise ConfigurationError("magnitude must be nonnegative")
        x_star = np.atleast_1d(np.asarray(self.x_star, dtype=float))
        d_x = x_star.shape[0]
        Q = _as_matrix("Q", self.Q, d_x, d_x)
        Q_T = _as_matrix("Q_T", self.Q_T, d_x, d_x)
        R = _as_matrix("R", self.R, d_x, d_x)
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        Sigma0 = _as_matrix("Sigma0", self.Sigma0, d_x, d_x)
        _check_psd("Q", Q)
        _check_psd("Q_T", Q_T)
        _check_psd("R", R, strict=True)
        for name, val in [("x_star", x_star), ("Q", Q), ("Q_T", Q_T), ("R", R),
                          ("sigma", sigma), ("C", C), ("m0", m0), ("Sigma0", Sigma0)]:
            object.__setattr__(self, name, val)

    @property
    def dim_x(self) -> int:
        return self.x_star.shape[0]


@dataclass(frozen=True)
class WindowState:
    """The last K observations, most recent last.  Immutable."""

    window: tuple
    K: int

    def __post_init__(self):
        if len(self.window) > self.K:
            raise ValueError("window longer than its capacity K")
        object.__setattr__(
            self, "window", tuple(np.asarray(y, dtype=float).reshape(-1) for y in self.window)
        )

    @classmethod
    def empty(cls, K: int) -> "WindowState":
        return cls(window=(), K=K)

    def __len__(self) -> int:
        return len(self.window)

    def flatten(self, dim_y: int) -> np.ndarray:
        """Concatenate, zero-padding missing (oldest) slots at the front."""
        out = np.zeros(self.K * dim_y)
        for i, y in enumerate(reversed(self.window)):
            out[(self.K - 1 - i) * dim_y:(self.K - i) * dim_y] = y
        return out


def window_update(z: WindowState, y: np.ndarray) -> WindowState:
    """Append ``y``; drop the oldest entry once the window is full."""
    w = z.window + (np.asarray(y, dtype=float).reshape(-1),)
    if len(w) > z.K:
        w = w[1:]
    return WindowState(window=w, K=z.K)


def observation_cost(beta: np.ndarray, kappa: np.ndarray) -> float:
    """Per-observation sensing cost sum_i kappa_i / beta_i."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    if np.any(beta <= 0):
        raise ValueError("all beta components must be strictly positive")
    if np.any(kappa < 0):
        raise ValueError("kappa components must be nonnegative")
    return float(np.sum(kappa / beta))


def obstacle_penalty(t: float, x: np.ndarray, spec: ObstacleSpec):
    """Shell penalty: ``magnitude`` when t in [t_min, t_max] and
    r_in <= ||x||_2 <= r_out, else 0.  Batched over leading axes of x."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(np.atleast_1d(x), axis=-1)
    in_time = (spec.t_min <= t) & (t <= spec.t_max)
    in_band = (spec.r_in <= r) & (r <= spec.r_out)
    out = np.where(in_time & in_band, spec.magnitude, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def uniform_obs_times(n_obs: int, horizon: float) -> tuple:
    """Default schedule t_n = n*T/(N_o+1), n = 1..N_o."""
    return tuple(n * horizon / (n_obs + 1) for n in range(1, n_obs + 1))


def gaussian_log_density(y: np.ndarray, mean: np.ndarray, std: np.ndarray):
    """Log of a diagonal Gaussian density; broadcasts over leading axes."""
    y = np.asarray(y, dtype=float)
    std = np.asarray(std, dtype=float)
    resid = (y - mean) / std
    return -0.5 * np.sum(resid * resid, axis=-1) - np.sum(np.log(std), axis=-1) \
        - 0.5 * np.shape(np.atleast_1d(y))[-1] * math.log(2.0 * math.pi)


def _gaussian_initial_sampler(m0: np.ndarray, Sigma0: np.ndarray) -> Callable:
    chol = np.linalg.cholesky(Sigma0 + 1e-300 * np.eye(len(m0))) if np.any(Sigma0) \
        else np.zeros_like(Sigma0)

    def sample(rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal((size, len(m0)))
        return m0 + z @ chol.T

    return sample


def make_lqg_problem(spec: LqgSpec, obs_times: Sequence[float], horizon: float = 1.0,
                     beta_grid: Optional[np.ndarray] = None) -> ControlProblem:
    """Assemble the ControlProblem for the LQG family.

    Drift Ax + B alpha, constant diffusion sigma, Gaussian likelihood with
    mean Cx and per-channel standard deviations beta, running cost
    (x'Qx + a'Ra)/2, terminal cost x'Q_T x/2 and impulse cost sum(kappa/beta).
    """
    A, B, C, sigma = spec.A, spec.B, spec.C, spec.sigma
    Q, R, Q_T = spec.Q, spec.R, spec.Q_T
    d_y = spec.dim_y
    kappa = spec.kappa

    def drift(t, x, alpha):
        return np.asarray(x) @ A.T + np.asarray(alpha) @ B.T

    def diffusion(t, x, alpha):
        return sigma

    def loglik(y, x, beta, n):
        mean = np.asarray(x) @ C.T
        return gaussian_log_density(y, mean, np.atleast_1d(beta))

    def obs_sampler(x, beta, n, xi):
        return np.asarray(x) @ C.T + np.atleast_1d(beta) * xi

    def running(t, x, alpha):
        x = np.asarray(x)
        a = np.asarray(alpha)
        return 0.5 * (np.sum((x @ Q) * x, axis=-1) + np.sum((a @ R) * a, axis=-1))

    def impulse(n, x, beta):
        if kappa is None:
            return np.zeros(np.shape(np.atleast_2d(x))[0]) if np.ndim(x) > 1 else 0.0
        cost = float(np.sum(kappa[n] / np.atleast_1d(beta), axis=-1)) if np.ndim(beta) <= 1 \
            else np.sum(kappa[n] / beta, axis=-1)
        if np.ndim(x) > 1 and np.ndim(cost) == 0:
            return np.full(np.shape(x)[0], cost)
        return cost

    def terminal(x):
        x = np.asarray(x)
        return 0.5 * np.sum((x @ Q_T) * x, axis=-1)

    fixed_beta = None
    if spec.fixed_eps is not None:
        fixed_beta = np.full(d_y, float(spec.fixed_eps))
    if fixed_beta is None and beta_grid is None:
        raise ConfigurationError("either fixed_eps or a beta candidate grid is required")

    return ControlProblem(
        dim_x=spec.dim_x, dim_alpha=spec.dim_alpha, dim_beta=d_y, dim_y=d_y,
        dim_w=spec.dim_w, horizon=float(horizon), obs_times=tuple(obs_times),
        drift=drift, diffusion=diffusion, likelihood_logdensity=loglik,
        observation_sampler=obs_sampler, running_cost=running, impulse_cost=impulse,
        terminal_cost=terminal,
        initial_sampler=_gaussian_initial_sampler(spec.m0, spec.Sigma0),
        initial_mean=spec.m0, initial_cov=spec.Sigma0,
        beta_grid=None if beta_grid is None else np.atleast_2d(np.asarray(beta_grid, dtype=float)),
        fixed_beta=fixed_beta,
        control_matrix=B, control_cost=R, lqg=spec,
    )


def make_obstacle_problem(spec: ObstacleSpec, obs_times: Sequence[float],
                          horizon: float = 1.0,
                          alpha_grid: Optional[np.ndarray] = None,
                          alpha_bound: Optional[float] = None) -> ControlProblem:
    """Integrator dynamics dX = alpha dt + sigma dW with a shell penalty.

    ``alpha_bound`` installs a symmetric box on the control; recommended in
    closed-form mode, where an unbounded polynomial policy can destabilize
    trajectories far from the training cloud."""
    d_x = spec.dim_x
    sigma = spec.sigma
    C = spec.C
    Q, R, Q_T = spec.Q, spec.R, spec.Q_T
    x_star = spec.x_star
    d_y = C.shape[0]
    eps = np.full(d_y, float(spec.fixed_eps))

    def drift(t, x, alpha):
        return np.broadcast_to(np.asarray(alpha, dtype=float), np.shape(x)).copy() \
            if np.shape(alpha) != np.shape(x) else np.asarray(alpha, dtype=float)

    def diffusion(t, x, alpha):
        return sigma

    def loglik(y, x, beta, n):
        return gaussian_log_density(y, np.asarray(x) @ C.T, np.atleast_1d(beta))

    def obs_sampler(x, beta, n, xi):
        return np.asarray(x) @ C.T + np.atleast_1d(beta) * xi

    def running(t, x, alpha):
        x = np.asarray(x)
        a = np.asarray(alpha)
        quad = 0.5 * (np.sum((x @ Q) * x, axis=-1) + np.sum((a @ R) * a, axis=-1))
        return quad + obstacle_penalty(t, x, spec)

    def impulse(n, x, beta):
        return np.zeros(np.shape(x)[0]) if np.ndim(x) > 1 else 0.0

    def terminal(x):
        d = np.asarray(x) - x_star
        return 0.5 * np.sum((d @ Q_T) * d, axis=-1)

    return ControlProblem(
        dim_x=d_x, dim_alpha=d_x, dim_beta=d_y, dim_y=d_y, dim_w=sigma.shape[1],
        horizon=float(horizon), obs_times=tuple(obs_times),
        drift=drift, diffusion=diffusion, likelihood_logdensity=loglik,
        observation_sampler=obs_sampler, running_cost=running, impulse_cost=impulse,
        terminal_cost=terminal,
        initial_sampler=_gaussian_initial_sampler(spec.m0, spec.Sigma0),
        initial_mean=spec.m0, initial_cov=spec.Sigma0,
        alpha_grid=None if alpha_grid is None else np.atleast_2d(np.asarray(alpha_grid, dtype=float)),
        alpha_low=None if alpha_bound is None else np.full(d_x, -float(alpha_bound)),
        alpha_high=None if alpha_bound is None else np.full(d_x, float(alpha_bound)),
        fixed_beta=eps,
        control_matrix=np.eye(d_x), control_cost=R, obstacle=spec,
    )
