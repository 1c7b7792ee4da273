"""Euler-Maruyama simulation: seeded random streams, time grids aligned to the
observation schedule, single-trajectory rollouts and the vectorized batch
engine used for Monte Carlo evaluation and training.

Randomness contract: every trajectory owns a counter-based stream keyed by
``(seed, stream_id)`` and consumes it in a fixed order (initial state, then
per-slab Brownian blocks, then the observation noise of that slab).  Results
therefore do not depend on batch size or evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .model import ControlProblem, WindowState, window_update

__all__ = [
    "PropagationError",
    "RolloutError",
    "RngStream",
    "TimeGrid",
    "Rollout",
    "SimResult",
    "build_grid",
    "em_step",
    "rollout",
    "simulate_batch",
]

DEFAULT_DT = 0.01


class PropagationError(RuntimeError):
    """A state became non-finite during propagation."""


class RolloutError(RuntimeError):
    """Policy evaluation failed inside a rollout."""


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream; (seed, stream_id) determines the sequence."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed % 2**64,
                                                         self.stream_id % 2**64]))

    def substream(self, k: int) -> "RngStream":
        # disjoint keys for derived draws (e.g. candidate sampling)
        return RngStream(self.seed, self.stream_id * 1_000_003 + k + 1)


@dataclass(frozen=True)
class TimeGrid:
    """Grid on [0, T] whose nodes include every observation time exactly.

    Slab n spans [t_n, t_{n+1}] with t_0 = 0 and t_{N_o+1} = T; each slab is
    subdivided uniformly with step close to the requested dt.
    """

    times: np.ndarray                  # (n_nodes,)
    slab_start_nodes: np.ndarray       # (N_o + 2,) node index of each slab boundary
    obs_nodes: np.ndarray              # (N_o,) node index of each observation time

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def n_slabs(self) -> int:
        return len(self.slab_start_nodes) - 1

    def slab_steps(self, n: int) -> range:
        return range(self.slab_start_nodes[n], self.slab_start_nodes[n + 1])


def build_grid(obs_times: Sequence[float], horizon: float,
               dt: float = DEFAULT_DT) -> TimeGrid:
    bounds = [0.0, *obs_times, horizon]
    times = [0.0]
    starts = [0]
    for a, b in zip(bounds, bounds[1:]):
        steps = max(1, int(round((b - a) / dt)))
        seg = a + (b - a) * np.arange(1, steps + 1) / steps
        times.extend(seg.tolist())
        starts.append(len(times) - 1)
    times = np.asarray(times)
    starts = np.asarray(starts, dtype=int)
    return TimeGrid(times=times, slab_start_nodes=starts, obs_nodes=starts[1:-1])


def em_step(x: np.ndarray, t: float, alpha: np.ndarray, dt: float,
            noise: np.ndarray, problem: ControlProblem) -> np.ndarray:
    """One Euler-Maruyama step; ``noise`` holds standard normals, the sqrt(dt)
    scaling happens here.  Batched over a leading axis of x/alpha/noise."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    b = problem.drift(t, x, alpha)
    sig = np.asarray(problem.diffusion(t, x, alpha), dtype=float)
    if sig.ndim <= 2:
        dw = np.asarray(noise) @ sig.T
    else:  # per-sample diffusion matrices (M, d_x, d_w)
        dw = np.einsum("mij,mj->mi", sig, np.atleast_2d(noise))
    out = np.asarray(x) + np.asarray(b) * dt + dw * np.sqrt(dt)
    if not np.all(np.isfinite(out)):
        bad = np.nonzero(~np.isfinite(np.atleast_2d(out)).all(axis=-1))[0]
        raise PropagationError(f"non-finite state after EM step at t={t:g} "
                               f"(trajectories {bad[:5].tolist()})")
    return out


@dataclass
class Rollout:
    """A single closed-loop trajectory with its pathwise cost decomposition."""

    times: np.ndarray
    states: np.ndarray            # (n_nodes, d_x)
    observations: np.ndarray      # (N_o, d_y)
    windows: List[WindowState]    # window after each observation
    controls_alpha: np.ndarray    # (n_steps, d_alpha)
    controls_beta: np.ndarray     # (N_o, d_beta)
    stage_costs: np.ndarray       # (n_steps,) f * dt increments
    impulse_costs: np.ndarray     # (N_o,)
    terminal_cost_value: float

    @property
    def total_cost(self) -> float:
        return float(self.stage_costs.sum() + self.impulse_costs.sum()
                     + self.terminal_cost_value)


@dataclass
class SimResult:
    """Batch simulation output; heavyweight arrays are filled only on request."""

    grid: TimeGrid
    n_traj: int
    stage_costs: np.ndarray          # (M, n_steps)
    impulse_costs: np.ndarray        # (M, N_o)
    terminal_costs: np.ndarray       # (M,)
    observations: np.ndarray         # (M, N_o, d_y)
    betas: np.ndarray                # (M, N_o, d_beta)
    states: Optional[np.ndarray] = None        # (M, n_nodes, d_x)
    alphas: Optional[np.ndarray] = None        # (M, n_steps, d_alpha)
    windows_by_slab: Optional[np.ndarray] = None  # (N_o+1, M, K*d_y)
    extra_stat: Optional[np.ndarray] = None    # (M,) integral of the extra statistic

    @property
    def total_costs(self) -> np.ndarray:
        return self.stage_costs.sum(axis=1) + self.impulse_costs.sum(axis=1) \
            + self.terminal_costs

    def remaining_costs(self) -> np.ndarray:
        """Pathwise cost-to-go P at every grid node, shape (M, n_nodes).

        At an observation node the value includes that observation's impulse
        cost (pre-observation convention)."""
        n_nodes = len(self.grid.times)
        out = np.zeros((self.n_traj, n_nodes))
        out[:, -1] = self.terminal_costs
        node_to_obs = {int(node): n for n, node in enumerate(self.grid.obs_nodes)}
        for k in range(n_nodes - 2, -1, -1):
            out[:, k] = out[:, k + 1] + self.stage_costs[:, k]
            if k in node_to_obs:
                out[:, k] += self.impulse_costs[:, node_to_obs[k]]
        return out


class _StatelessPolicyAdapter:
    """Wraps plain (alpha_policy, beta_policy) callables into the engine
    protocol used by simulate_batch."""

    def __init__(self, alpha_policy: Callable, beta_policy: Callable, window_K: int):
        self.alpha_policy = alpha_policy
        self.beta_policy = beta_policy
        self.window_K = window_K

    def begin(self, problem, grid, n_traj):
        return None

    def alpha(self, k, t, windows, state):
        return self.alpha_policy(t, None, windows)

    def advance(self, k, t, dt, alpha, state):
        return state

    def beta(self, n, windows_pre, state):
        return self.beta_policy(n, windows_pre)

    def observe(self, n, y, beta, state):
        return state


def as_engine_policy(policy) -> object:
    if hasattr(policy, "begin") and hasattr(policy, "alpha"):
        return policy
    return _StatelessPolicyAdapter(policy.alpha_policy, policy.beta_policy,
                                   getattr(policy, "window_K", 1))


def simulate_batch(problem: ControlProblem, policy, grid: TimeGrid,
                   seed: int, stream_start: int, n_traj: int,
                   record_states: bool = False,
                   record_alphas: bool = False,
                   record_windows: bool = False,
                   extra_step_stat: Optional[Callable] = None) -> SimResult:
    """Run ``n_traj`` closed-loop trajectories with streams
    ``stream_start .. stream_start + n_traj - 1``.

    ``extra_step_stat(t, x, alpha) -> (M,)`` is integrated against dt
    (used e.g. for penalty-region occupancy time)."""
    pol = as_engine_policy(policy)
    K = pol.window_K
    d_x, d_y, d_w = problem.dim_x, problem.dim_y, problem.dim_w
    d_a, d_b = problem.dim_alpha, problem.dim_beta
    N_o = problem.n_obs
    times = grid.times
    n_steps = grid.n_steps

    gens = [RngStream(seed, stream_start + m).generator() for m in range(n_traj)]
    x = np.vstack([problem.initial_sampler(g, 1) for g in gens])
    if x.shape != (n_traj, d_x):
        raise PropagationError("initial sampler returned wrong shape")

    windows = np.zeros((n_traj, K * d_y))
    stage = np.zeros((n_traj, n_steps))
    impulse = np.zeros((n_traj, max(N_o, 1)))[:, :N_o]
    obs = np.zeros((n_traj, N_o, d_y))
    betas = np.zeros((n_traj, N_o, d_b))
    states = np.zeros((n_traj, n_steps + 1, d_x)) if record_states else None
    alphas = np.zeros((n_traj, n_steps, d_a)) if record_alphas else None
    win_rec = np.zeros((N_o + 1, n_traj, K * d_y)) if record_windows else None
    extra = np.zeros(n_traj) if extra_step_stat is not None else None
    if record_states:
        states[:, 0] = x

    pstate = pol.begin(problem, grid, n_traj)

    for slab in range(grid.n_slabs):
        if record_windows:
            win_rec[slab] = windows
        steps = list(grid.slab_steps(slab))
        noise = np.empty((n_traj, len(steps), d_w))
        for m, g in enumerate(gens):
            noise[m] = g.standard_normal((len(steps), d_w))
        for j, k in enumerate(steps):
            t = times[k]
            dt = times[k + 1] - times[k]
            try:
                a = np.atleast_2d(pol.alpha(k, t, windows, pstate))
            except Exception as exc:  # noqa: BLE001 - surfaced with context
                raise RolloutError(f"alpha policy failed at t={t:g}: {exc}") from exc
            a = np.broadcast_to(np.asarray(a, dtype=float), (n_traj, d_a))
            a = problem.clip_alpha(a)
            stage[:, k] = np.asarray(problem.running_cost(t, x, a)) * dt
            if extra_step_stat is not None:
                extra += np.asarray(extra_step_stat(t, x, a)) * dt
            if record_alphas:
                alphas[:, k] = a
            x = em_step(x, t, a, dt, noise[:, j], problem)
            if record_states:
                states[:, k + 1] = x
            pstate = pol.advance(k, t, dt, a, pstate)
        if slab < N_o:
            n = slab
            try:
                b = np.atleast_2d(pol.beta(n, windows, pstate))
            except Exception as exc:  # noqa: BLE001
                raise RolloutError(f"beta policy failed at observation {n}: {exc}") from exc
            b = np.broadcast_to(np.asarray(b, dtype=float), (n_traj, d_b))
            betas[:, n] = b
            impulse[:, n] = np.asarray(problem.impulse_cost(n, x, b))
            xi = np.empty((n_traj, d_y))
            for m, g in enumerate(gens):
                xi[m] = g.standard_normal(d_y)
            y = np.asarray(problem.observation_sampler(x, b, n, xi))
            obs[:, n] = y
            windows = np.concatenate([windows[:, d_y:], y], axis=1) if K > 0 else windows
            pstate = pol.observe(n, y, b, pstate)
    if record_windows:
        win_rec[N_o] = windows

    term = np.asarray(problem.terminal_cost(x), dtype=float)
    return SimResult(grid=grid, n_traj=n_traj, stage_costs=stage,
                     impulse_costs=impulse, terminal_costs=np.atleast_1d(term),
                     observations=obs, betas=betas, states=states, alphas=alphas,
                     windows_by_slab=win_rec, extra_stat=extra)


def rollout(problem: ControlProblem, policy, dt: float, rng: RngStream) -> Rollout:
    """Simulate one closed-loop trajectory on the observation-aligned grid."""
    grid = build_grid(problem.obs_times, problem.horizon, dt)
    res = simulate_batch(problem, policy, grid, rng.seed, rng.stream_id, 1,
                         record_states=True, record_alphas=True)
    K = as_engine_policy(policy).window_K
    wins: List[WindowState] = []
    w = WindowState.empty(K)
    for n in range(problem.n_obs):
        w = window_update(w, res.observations[0, n])
        wins.append(w)
    return Rollout(
        times=grid.times,
        states=res.states[0],
        observations=res.observations[0],
        windows=wins,
        controls_alpha=res.alphas[0],
        controls_beta=res.betas[0],
        stage_costs=res.stage_costs[0],
        impulse_costs=res.impulse_costs[0],
        terminal_cost_value=float(res.terminal_costs[0]),
    )
