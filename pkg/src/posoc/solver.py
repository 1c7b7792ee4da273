"""Particle fixed-point solver: fit a per-time-node value ansatz to pathwise
remaining costs, extract controls from the fitted value, resimulate, repeat.

Policies depend on the sliding observation window only; conditional
expectations given the window are estimated by cross-sectional regression over
the trajectory cloud.  Observation nodes carry two ansatz entries: a pre node
whose target includes the impulse cost and uses the window before the
observation, and a post node whose target excludes it and sees the updated
window.  The post node is what the observation-control extraction integrates
against.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model import ControlProblem, WindowState
from .regression import FeatureBasis, ValueAnsatz, fit_value_ansatz, _standardized_fit
from .sde import RngStream, SimResult, TimeGrid, build_grid, simulate_batch

__all__ = [
    "AnsatzLayout",
    "PolicyPair",
    "TrainConfig",
    "TrainHistory",
    "TrainedPolicy",
    "TrainingAborted",
    "extract_alpha",
    "extract_beta",
    "pathwise_costs",
    "train",
    "zero_policy",
]


class TrainingAborted(RuntimeError):
    """A forward pass failed; partial results ride along on the exception."""

    def __init__(self, message, history, ansatz=None, policy=None):
        super().__init__(message)
        self.history = history
        self.ansatz = ansatz
        self.policy = policy


@dataclass(frozen=True)
class AnsatzLayout:
    """Mapping between grid nodes and ansatz nodes (observation nodes doubled)."""

    grid: TimeGrid
    times: np.ndarray       # (n_ansatz,)
    pre_of: np.ndarray      # (n_nodes,) ansatz index, pre-observation convention
    post_of: np.ndarray     # (n_nodes,) ansatz index, post-observation convention

    @classmethod
    def from_grid(cls, grid: TimeGrid) -> "AnsatzLayout":
        obs = set(int(k) for k in grid.obs_nodes)
        times, pre, post = [], [], []
        for k, t in enumerate(grid.times):
            if k in obs:
                pre.append(len(times))
                times.append(float(t))
                post.append(len(times))
                times.append(float(t))
            else:
                pre.append(len(times))
                post.append(len(times))
                times.append(float(t))
        return cls(grid=grid, times=np.asarray(times),
                   pre_of=np.asarray(pre, dtype=int),
                   post_of=np.asarray(post, dtype=int))

    @property
    def n_ansatz(self) -> int:
        return len(self.times)


@dataclass
class PolicyPair:
    """Plain evaluable policy: state-feedback part and observation part."""

    alpha_policy: callable            # (t, x, z) -> (.., d_alpha)
    beta_policy: callable             # (n, z) -> (.., d_beta)
    mode: str = "closed_form_lqg"
    window_K: int = 1


def zero_policy(problem: ControlProblem, window_K: int = 1) -> PolicyPair:
    """No actuation; observations at the exogenous level (or first candidate)."""
    if problem.fixed_beta is not None:
        b = problem.fixed_beta
    else:
        b = problem.beta_grid[0]

    return PolicyPair(
        alpha_policy=lambda t, x, z: np.zeros(problem.dim_alpha),
        beta_policy=lambda n, z: b,
        mode="zero",
        window_K=window_K,
    )


def _flatten_window(z, K: int, d_y: int) -> np.ndarray:
    if isinstance(z, WindowState):
        return z.flatten(d_y)[None, :]
    zf = np.atleast_2d(np.asarray(z, dtype=float))
    if zf.shape[1] < K * d_y:
        pad = np.zeros((zf.shape[0], K * d_y - zf.shape[1]))
        zf = np.concatenate([pad, zf], axis=1)
    return zf


def pathwise_costs(problem: ControlProblem, res: SimResult,
                   layout: AnsatzLayout) -> List[Tuple[float, np.ndarray, np.ndarray]]:
    """Per-ansatz-node regression samples (t, inputs, targets) from a batch
    simulation recorded with states and windows.

    Targets are the pathwise remaining costs; at an observation node the pre
    entry includes that observation's impulse cost, the post entry does not.
    """
    if res.states is None or res.windows_by_slab is None:
        raise ValueError("simulation must record states and windows")
    grid = layout.grid
    P = res.remaining_costs()
    starts = grid.slab_start_nodes
    node_to_obs = {int(node): n for n, node in enumerate(grid.obs_nodes)}
    out: List[Optional[Tuple[float, np.ndarray, np.ndarray]]] = [None] * layout.n_ansatz
    for k, t in enumerate(grid.times):
        if k in node_to_obs:
            n = node_to_obs[k]
            x = res.states[:, k]
            pre_in = np.concatenate([x, res.windows_by_slab[n]], axis=1)
            out[layout.pre_of[k]] = (float(t), pre_in, P[:, k])
            post_in = np.concatenate([x, res.windows_by_slab[n + 1]], axis=1)
            out[layout.post_of[k]] = (float(t), post_in,
                                      P[:, k] - res.impulse_costs[:, n])
        else:
            s = min(int(np.searchsorted(starts, k, side="right")) - 1,
                    grid.n_slabs - 1)
            inp = np.concatenate([res.states[:, k], res.windows_by_slab[s]], axis=1)
            out[layout.pre_of[k]] = (float(t), inp, P[:, k])
    return out  # type: ignore[return-value]


def _sigma_squared(problem: ControlProblem, t: float, x: np.ndarray) -> np.ndarray:
    a0 = np.zeros(problem.dim_alpha)
    sig = np.asarray(problem.diffusion(t, x[:1], a0), dtype=float)
    if sig.ndim > 2:
        raise NotImplementedError("state-dependent diffusion is not supported "
                                  "by the grid-search extraction")
    return sig @ sig.T


def extract_alpha(ansatz: ValueAnsatz, ensemble, z, t: float,
                  problem: ControlProblem, node: Optional[int] = None) -> np.ndarray:
    """Pointwise control from the fitted value and a belief ensemble.

    With quadratic control cost and control-affine drift this is the closed
    form -R^{-1} B' E_mu[grad_x p]; otherwise every candidate of the control
    grid is scored by the ensemble-averaged running cost plus generator term
    and the minimizer is returned (ties break toward the first candidate).
    """
    if node is None:
        node = int(np.nonzero(np.isclose(ansatz.time_nodes, t))[0][-1]) \
            if np.any(np.isclose(ansatz.time_nodes, t)) \
            else int(np.abs(ansatz.time_nodes - t).argmin())
    K = getattr(z, "K", 1)
    zf = _flatten_window(z, K, problem.dim_y)
    x = ensemble.states
    w = ensemble.weights / ensemble.weights.sum()
    inputs = np.concatenate([x, np.broadcast_to(zf, (len(x), zf.shape[1]))], axis=1)
    if problem.alpha_grid is None:
        if problem.control_matrix is None or problem.control_cost is None:
            raise ValueError("need either a control grid or the quadratic "
                             "(control_matrix, control_cost) structure")
        g = ansatz.gradient_x(node, inputs)
        g_bar = w @ g
        alpha = -np.linalg.solve(problem.control_cost, problem.control_matrix.T @ g_bar)
        return problem.clip_alpha(alpha)
    sig2 = _sigma_squared(problem, t, x)
    best_val, best = np.inf, None
    for cand in problem.alpha_grid:
        a = np.broadcast_to(cand, (len(x), problem.dim_alpha))
        q = np.asarray(problem.running_cost(t, x, a), dtype=float) \
            + ansatz.generator_term(node, inputs, problem.drift(t, x, a), sig2)
        val = float(w @ q)
        if val < best_val - 1e-15:
            best_val, best = val, cand
    return np.asarray(best, dtype=float)


def extract_beta(ansatz: ValueAnsatz, layout: AnsatzLayout, ensemble, z_pre,
                 n: int, candidates: np.ndarray, problem: ControlProblem,
                 rng: RngStream, n_y_samples: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Score each observation-control candidate at observation ``n``.

    The objective is the impulse cost plus the predictive average of the
    post-observation value, the inner expectation over the observation noise
    taken with ``n_y_samples`` draws shared across candidates.  Returns the
    objective table and the minimizing candidate (ties break toward the first).
    """
    node = int(layout.post_of[layout.grid.obs_nodes[n]])
    K = getattr(z_pre, "K", 1)
    zf = _flatten_window(z_pre, K, problem.dim_y)
    M = len(ensemble.states)
    zf = np.broadcast_to(zf, (M, zf.shape[1]))
    w = ensemble.weights / ensemble.weights.sum()
    x = ensemble.states
    g = rng.generator()
    xi = g.standard_normal((n_y_samples, M, problem.dim_y))
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    objectives = np.empty(len(candidates))
    d_y = problem.dim_y
    for c, b in enumerate(candidates):
        bc = np.broadcast_to(b, (M, problem.dim_beta))
        total = w @ np.asarray(problem.impulse_cost(n, x, bc), dtype=float)
        for j in range(n_y_samples):
            y = np.asarray(problem.observation_sampler(x, b, n, xi[j]))
            z_post = np.concatenate([zf[:, d_y:], y], axis=1)
            inputs = np.concatenate([x, z_post], axis=1)
            total += (w @ ansatz.evaluate(node, inputs)) / n_y_samples
        objectives[c] = total
    best = int(np.argmin(np.round(objectives / max(1e-12, np.abs(objectives).max()),
                                  12)))
    # argmin on rounded relative values keeps exact ties at the first candidate
    return objectives, candidates[best]


@dataclass
class TrainConfig:
    M_train: int = 500
    dt: float = 0.01
    n_outer: int = 30
    tol: float = 1e-3
    ridge: float = 1e-6          # per-sample; scaled by the cloud size
    degree: int = 2
    window_K: int = 1
    n_y_samples: int = 8
    seed: int = 0
    include_cross: bool = True
    # For problems invariant under (x, z) -> (-x, -z) (centered symmetric
    # dynamics, even costs): fit on mirrored sample pairs, which exactly
    # zeroes the odd value coefficients and the spurious constant drift in
    # the extracted state control.
    symmetrize: bool = False


@dataclass
class TrainHistory:
    costs: List[float] = field(default_factory=list)
    ci95: List[float] = field(default_factory=list)
    theta_deltas: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    converged: bool = False
    best_iteration: Optional[int] = None

    @property
    def n_iterations(self) -> int:
        return len(self.costs)


class TrainedPolicy:
    """Evaluable policy from one fixed-point pass: per-step window-feature
    regressions for the state control, per-observation candidate surfaces for
    the observation control."""

    def __init__(self, step_times: np.ndarray, z_basis: FeatureBasis,
                 mode: str, window_K: int,
                 alpha_coefs: List[np.ndarray],
                 alpha_grid: Optional[np.ndarray],
                 beta_surfaces: Optional[List[np.ndarray]],
                 beta_grid: Optional[np.ndarray],
                 fixed_beta: Optional[np.ndarray],
                 alpha_low: Optional[np.ndarray] = None,
                 alpha_high: Optional[np.ndarray] = None):
        self.step_times = np.asarray(step_times, dtype=float)
        self.z_basis = z_basis
        self.mode = mode
        self.window_K = window_K
        self.alpha_coefs = alpha_coefs
        self.alpha_grid = alpha_grid
        self.beta_surfaces = beta_surfaces
        self.beta_grid = beta_grid
        self.fixed_beta = fixed_beta
        self.alpha_low = alpha_low
        self.alpha_high = alpha_high

    # -- engine protocol --------------------------------------------------
    def begin(self, problem, grid, n_traj):
        step_t = grid.times[:-1]
        idx = np.abs(step_t[:, None] - self.step_times[None, :]).argmin(axis=1)
        return {"step_map": idx}

    def alpha(self, k, t, windows, state):
        return self._alpha_from_features(state["step_map"][k],
                                         self.z_basis.evaluate(windows))

    def advance(self, k, t, dt, alpha, state):
        return state

    def beta(self, n, windows_pre, state):
        if self.fixed_beta is not None:
            return self.fixed_beta
        vals = self.z_basis.evaluate(windows_pre) @ self.beta_surfaces[n].T
        return self.beta_grid[np.argmin(vals, axis=1)]

    def observe(self, n, y, beta, state):
        return state

    # -- plain callables --------------------------------------------------
    def alpha_policy(self, t, x, z):
        k = int(np.abs(self.step_times - t).argmin())
        zf = _flatten_window(z, self.window_K,
                             self.z_basis.input_dim // self.window_K)
        return self._alpha_from_features(k, self.z_basis.evaluate(zf))

    def beta_policy(self, n, z):
        if self.fixed_beta is not None:
            return self.fixed_beta
        zf = _flatten_window(z, self.window_K,
                             self.z_basis.input_dim // self.window_K)
        vals = self.z_basis.evaluate(zf) @ self.beta_surfaces[n].T
        return self.beta_grid[np.argmin(vals, axis=1)]

    def _alpha_from_features(self, k: int, phi: np.ndarray) -> np.ndarray:
        coef = self.alpha_coefs[k]
        if self.mode == "grid_search":
            return self.alpha_grid[np.argmin(phi @ coef.T, axis=1)]
        a = phi @ coef
        if self.alpha_low is not None or self.alpha_high is not None:
            a = np.clip(a, self.alpha_low, self.alpha_high)
        return a


def _fit_columns(phi: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    t = np.atleast_2d(targets.T).T  # (M, c)
    return np.column_stack([_standardized_fit(phi, t[:, c], ridge)
                            for c in range(t.shape[1])])


class _Trainer:
    """State shared by the passes of one train() call."""

    def __init__(self, problem: ControlProblem, config: TrainConfig):
        self.problem = problem
        self.config = config
        self.grid = build_grid(problem.obs_times, problem.horizon, config.dt)
        self.layout = AnsatzLayout.from_grid(self.grid)
        K, d_y, d_x = config.window_K, problem.dim_y, problem.dim_x
        self.basis = FeatureBasis(degree=config.degree, input_dim=d_x + K * d_y,
                                  dim_x=d_x, include_cross=config.include_cross)
        self.z_basis = FeatureBasis(degree=config.degree, input_dim=K * d_y,
                                    dim_x=0)
        self.mode = "grid_search" if problem.alpha_grid is not None \
            else "closed_form_lqg"
        self.ridge = config.ridge * config.M_train
        self.sig2 = _sigma_squared(problem, 0.0, np.zeros((1, d_x)))
        self.R_inv_Bt = None
        if self.mode == "closed_form_lqg":
            if problem.control_matrix is None or problem.control_cost is None:
                raise ValueError("closed-form extraction needs the quadratic "
                                 "(control_matrix, control_cost) structure")
            self.R_inv_Bt = np.linalg.solve(problem.control_cost,
                                            problem.control_matrix.T)

    def simulate(self, policy, stream_start: int) -> SimResult:
        return simulate_batch(self.problem, policy, self.grid, self.config.seed,
                              stream_start, self.config.M_train,
                              record_states=True, record_windows=True)

    def fit(self, res: SimResult) -> ValueAnsatz:
        samples = pathwise_costs(self.problem, res, self.layout)
        if self.config.symmetrize:
            samples = [(t, np.concatenate([u, -u]), np.concatenate([p, p]))
                       for t, u, p in samples]
        return fit_value_ansatz(samples, self.basis, self.ridge)

    def extract_alpha_coefs(self, ansatz: ValueAnsatz,
                            res: SimResult) -> List[np.ndarray]:
        problem, grid = self.problem, self.grid
        starts = grid.slab_start_nodes
        out: List[np.ndarray] = []
        for k in range(grid.n_steps):
            s = min(int(np.searchsorted(starts, k, side="right")) - 1,
                    grid.n_slabs - 1)
            x = res.states[:, k]
            win = res.windows_by_slab[s]
            inputs = np.concatenate([x, win], axis=1)
            phi_z = self.z_basis.evaluate(win)
            node = int(self.layout.post_of[k])
            t = float(grid.times[k])
            if self.mode == "closed_form_lqg":
                targets = -ansatz.gradient_x(node, inputs) @ self.R_inv_Bt.T
                targets = problem.clip_alpha(targets)
                if self.config.symmetrize:
                    # odd-in-window regression: mirrored samples carry the
                    # negated control target
                    phi_z = self.z_basis.evaluate(np.concatenate([win, -win]))
                    targets = np.concatenate([targets, -targets])
                out.append(_fit_columns(phi_z, targets, self.ridge))
            else:
                M = len(x)
                q = np.empty((M, len(problem.alpha_grid)))
                for c, cand in enumerate(problem.alpha_grid):
                    a = np.broadcast_to(cand, (M, problem.dim_alpha))
                    q[:, c] = np.asarray(problem.running_cost(t, x, a)) \
                        + ansatz.generator_term(node, inputs,
                                                problem.drift(t, x, a),
                                                self.sig2)
                out.append(_fit_columns(phi_z, q, self.ridge).T)
        return out

    def extract_beta_surfaces(self, ansatz: ValueAnsatz, res: SimResult,
                              it: int) -> List[np.ndarray]:
        problem, cfg = self.problem, self.config
        d_y = problem.dim_y
        g = RngStream(cfg.seed + 1, 1_000 + it).generator()
        out: List[np.ndarray] = []
        for n, k in enumerate(self.grid.obs_nodes):
            x = res.states[:, int(k)]
            win_pre = res.windows_by_slab[n]
            phi_z = self.z_basis.evaluate(win_pre)
            node = int(self.layout.post_of[int(k)])
            M = len(x)
            xi = g.standard_normal((cfg.n_y_samples, M, d_y))
            surf = np.empty((len(problem.beta_grid), M))
            for c, b in enumerate(problem.beta_grid):
                bc = np.broadcast_to(b, (M, problem.dim_beta))
                tgt = np.asarray(problem.impulse_cost(n, x, bc), dtype=float).copy()
                for j in range(cfg.n_y_samples):
                    y = np.asarray(problem.observation_sampler(x, b, n, xi[j]))
                    z_post = np.concatenate([win_pre[:, d_y:], y], axis=1)
                    tgt += ansatz.evaluate(node, np.concatenate([x, z_post],
                                                                axis=1)) \
                        / cfg.n_y_samples
                surf[c] = tgt
            out.append(_fit_columns(phi_z, surf.T, self.ridge).T)
        return out

    def make_policy(self, alpha_coefs, beta_surfaces) -> TrainedPolicy:
        return TrainedPolicy(step_times=self.grid.times[:-1],
                             z_basis=self.z_basis, mode=self.mode,
                             window_K=self.config.window_K,
                             alpha_coefs=alpha_coefs,
                             alpha_grid=self.problem.alpha_grid,
                             beta_surfaces=beta_surfaces,
                             beta_grid=self.problem.beta_grid,
                             fixed_beta=self.problem.fixed_beta,
                             alpha_low=self.problem.alpha_low,
                             alpha_high=self.problem.alpha_high)

    def zero_alpha_coefs(self) -> List[np.ndarray]:
        F = self.z_basis.n_features
        if self.mode == "grid_search":
            shape = (len(self.problem.alpha_grid), F)
        else:
            shape = (F, self.problem.dim_alpha)
        return [np.zeros(shape) for _ in range(self.grid.n_steps)]


def train(problem: ControlProblem, config: TrainConfig):
    """Run the fixed-point iteration and return (ansatz, policy, history).

    Each pass simulates the trajectory cloud under the current policy, fits
    the value coefficients to the pathwise remaining costs, and re-extracts
    the controls by regression on the window features.  When the observation
    control is adaptive, the update is staged: the new observation control is
    extracted first, a fresh cloud is simulated under (old state control, new
    observation control), and the state control is extracted from that refit.
    Without the staging, the state-control regression conditions on windows
    generated at the previous noise level and the two extractions chase each
    other instead of converging.  Iteration stops when the relative change of
    the simulated cost drops below ``tol``.

    The returned (ansatz, policy) is the iterate with the lowest simulated
    cost among those measured during training.  On smooth problems this
    coincides with the final iterate; on sharply penalized ones the iteration
    can oscillate and the best measured iterate is the stable choice.
    ``history.best_iteration`` records which one was kept.
    """
    tr = _Trainer(problem, config)
    history = TrainHistory()
    policy = zero_policy(problem, window_K=config.window_K)
    ansatz: Optional[ValueAnsatz] = None
    alpha_coefs = tr.zero_alpha_coefs()
    prev_theta = None
    pending = None
    best = None
    best_J = np.inf

    for it in range(config.n_outer):
        t0 = _time.perf_counter()
        try:
            res = tr.simulate(policy, 2 * it * config.M_train)
            costs = res.total_costs
            J = float(costs.mean())
            ci = float(1.96 * costs.std(ddof=1) / np.sqrt(config.M_train))
            if pending is not None and J < best_J:
                best, best_J = pending, J
                history.best_iteration = it - 1
            ansatz = tr.fit(res)
            beta_surfaces = None
            if problem.fixed_beta is None:
                beta_surfaces = tr.extract_beta_surfaces(ansatz, res, it)
                mid = tr.make_policy(alpha_coefs, beta_surfaces)
                res = tr.simulate(mid, (2 * it + 1) * config.M_train)
                ansatz = tr.fit(res)
            alpha_coefs = tr.extract_alpha_coefs(ansatz, res)
        except RuntimeError as exc:
            raise TrainingAborted(f"forward pass failed at iteration {it}: {exc}",
                                  history, ansatz,
                                  policy if it > 0 else None) from exc
        policy = tr.make_policy(alpha_coefs, beta_surfaces)
        pending = (ansatz, policy)

        delta = float(np.linalg.norm(ansatz.theta - prev_theta)) \
            if prev_theta is not None else float("nan")
        prev_theta = ansatz.theta.copy()
        history.costs.append(J)
        history.ci95.append(ci)
        history.theta_deltas.append(delta)
        history.seconds.append(_time.perf_counter() - t0)
        if it > 0:
            rel = abs(history.costs[-1] - history.costs[-2]) \
                / max(1.0, abs(history.costs[-2]))
            if rel < config.tol:
                history.converged = True
                break

    if history.converged and pending is not None:
        return pending[0], pending[1], history
    if best is not None:
        return best[0], best[1], history
    return ansatz, policy, history
