"""Finite-state oracle for the belief-space forward-backward system.

States form a continuous-time Markov chain whose generator is picked per time
step from a finite action set; observations at fixed times emit one of
finitely many symbols, with the emission kernel chosen from a finite set of
observation controls.  Beliefs and per-state cost-to-go vectors evolve by
explicit Euler steps that are exact transposes of each other, so the envelope
pairing of value and belief holds to machine precision and every claim here
can be checked against an exhaustive enumerator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

__all__ = [
    "FiniteChain",
    "TreeNode",
    "OracleSizeError",
    "DegeneracyError",
    "forward_belief_step",
    "bayes_jump",
    "backward_U_step",
    "u_jump",
    "lambda_jump",
    "hamiltonian_continuous",
    "hamiltonian_discrete",
    "exact_dp",
    "brute_force_value",
    "fully_observed_values",
    "fully_observed_bound",
    "load_chain",
]

_TOL = 1e-12


class OracleSizeError(RuntimeError):
    """The instance is too large for exact enumeration."""


class DegeneracyError(RuntimeError):
    """An observation symbol has zero predictive probability."""


@dataclass(frozen=True)
class FiniteChain:
    """A finite partially observed control instance.

    generators: (n_a, n_s, n_s), zero row sums, nonnegative off-diagonals
    running_costs: (n_a, n_s)
    emissions: (n_b, n_s, n_o), rows sum to one over symbols
    impulse_costs: (n_b, n_s), charged at every observation
    terminal_costs: (n_s,)
    """

    generators: np.ndarray
    running_costs: np.ndarray
    emissions: np.ndarray
    impulse_costs: np.ndarray
    terminal_costs: np.ndarray
    horizon: float
    obs_times: tuple
    dt: float

    def __post_init__(self):
        G = np.asarray(self.generators, dtype=float)
        f = np.asarray(self.running_costs, dtype=float)
        E = np.asarray(self.emissions, dtype=float)
        c = np.asarray(self.impulse_costs, dtype=float)
        g = np.asarray(self.terminal_costs, dtype=float)
        if G.ndim != 3 or G.shape[1] != G.shape[2]:
            raise ValueError("generators must have shape (n_a, n_s, n_s)")
        n_s = G.shape[1]
        if np.abs(G.sum(axis=2)).max() > _TOL:
            raise ValueError("generator rows must sum to zero")
        off = G.copy()
        for a in range(G.shape[0]):
            np.fill_diagonal(off[a], 0.0)
        if off.min() < -_TOL:
            raise ValueError("generator off-diagonals must be nonnegative")
        if f.shape != (G.shape[0], n_s):
            raise ValueError("running_costs must have shape (n_a, n_s)")
        if E.ndim != 3 or E.shape[1] != n_s:
            raise ValueError("emissions must have shape (n_b, n_s, n_o)")
        if E.min() < -_TOL or np.abs(E.sum(axis=2) - 1.0).max() > _TOL:
            raise ValueError("emission rows must be probability vectors")
        if c.shape != (E.shape[0], n_s):
            raise ValueError("impulse_costs must have shape (n_b, n_s)")
        if g.shape != (n_s,):
            raise ValueError("terminal_costs must have shape (n_s,)")
        ts = tuple(float(t) for t in self.obs_times)
        if any(t2 <= t1 for t1, t2 in zip(ts, ts[1:])) or \
                (ts and not (0.0 < ts[0] and ts[-1] < self.horizon)):
            raise ValueError("obs_times must be strictly increasing inside (0, T)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        # explicit Euler must keep I + dt*G nonnegative (monotone step)
        if self.dt * np.abs(np.diagonal(G, axis1=1, axis2=2)).max() > 1.0 + _TOL:
            raise ValueError("dt too large for a monotone Euler step")
        for name, val in [("generators", G), ("running_costs", f),
                          ("emissions", E), ("impulse_costs", c),
                          ("terminal_costs", g)]:
            object.__setattr__(self, name, val)
        object.__setattr__(self, "obs_times", ts)

    @property
    def n_states(self) -> int:
        return self.generators.shape[1]

    @property
    def n_actions(self) -> int:
        return self.generators.shape[0]

    @property
    def n_obs_controls(self) -> int:
        return self.emissions.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.emissions.shape[2]

    def slab_steps(self) -> List[Tuple[int, float]]:
        """(step count, step size) per inter-observation slab."""
        bounds = [0.0, *self.obs_times, self.horizon]
        out = []
        for lo, hi in zip(bounds, bounds[1:]):
            n = max(1, int(round((hi - lo) / self.dt)))
            out.append((n, (hi - lo) / n))
        return out


def forward_belief_step(mu: np.ndarray, a: int, dt: float,
                        chain: FiniteChain) -> np.ndarray:
    """Explicit Euler step of the Kolmogorov forward equation, renormalized."""
    out = mu + dt * (chain.generators[a].T @ mu)
    if out.min() < -_TOL:
        raise ValueError(f"belief turned negative (min {out.min():g}); reduce dt")
    out = np.maximum(out, 0.0)
    return out / out.sum()


def bayes_jump(mu_pre: np.ndarray, o: int, b: int,
               chain: FiniteChain) -> Tuple[np.ndarray, float]:
    """Posterior and predictive probability of symbol ``o`` under control b."""
    w = mu_pre * chain.emissions[b][:, o]
    L = float(w.sum())
    if L <= 0.0:
        raise DegeneracyError(f"symbol {o} has zero likelihood")
    return w / L, L


def backward_U_step(U: np.ndarray, a: int, dt: float,
                    chain: FiniteChain) -> np.ndarray:
    """One backward Euler step of the per-state cost-to-go, the exact
    transpose of forward_belief_step plus the running-cost increment."""
    return U + dt * (chain.generators[a] @ U + chain.running_costs[a])


def u_jump(U_post: np.ndarray, b: int, chain: FiniteChain) -> np.ndarray:
    """Pre-observation cost-to-go: impulse cost plus the emission-kernel
    average of the symbol-indexed vectors U_post, shape (n_o, n_s)."""
    return chain.impulse_costs[b] + np.einsum("so,os->s", chain.emissions[b],
                                              np.atleast_2d(U_post))


def lambda_jump(lambda_post: np.ndarray, b: int, mu_pre: np.ndarray,
                chain: FiniteChain) -> np.ndarray:
    """Adjoint jump across an observation.

    Differs from u_jump by the Bayes-normalization correction: the belief
    average of each symbol's adjoint mass, divided by the symbol likelihood,
    is subtracted back through the emission kernel.
    """
    E = chain.emissions[b]
    L = mu_pre @ E                              # (n_o,)
    lam = np.atleast_2d(lambda_post)
    m = np.einsum("s,so,os->o", mu_pre, E, lam)
    if np.any((L <= 0) & (np.abs(m) > 0)):
        raise DegeneracyError("zero-likelihood symbol with nonzero adjoint mass")
    ratio = np.divide(m, L, out=np.zeros_like(m), where=L > 0)
    return chain.impulse_costs[b] + np.einsum("so,os->s", E, lam) - E @ ratio


def hamiltonian_continuous(mu: np.ndarray, U: np.ndarray,
                           chain: FiniteChain) -> Tuple[float, int]:
    """min over actions of <f_a + G_a U, mu>; ties go to the first action."""
    vals = [float(mu @ (chain.running_costs[a] + chain.generators[a] @ U))
            for a in range(chain.n_actions)]
    a = int(np.argmin(np.round(vals, 12)))
    return vals[a], a


def hamiltonian_discrete(mu_pre: np.ndarray, U_post: np.ndarray,
                         chain: FiniteChain) -> Tuple[float, int]:
    """min over observation controls of the belief-averaged impulse cost plus
    the expected post-observation value; U_post has shape (n_o, n_s)."""
    vals = [float(mu_pre @ u_jump(U_post, b, chain))
            for b in range(chain.n_obs_controls)]
    b = int(np.argmin(np.round(vals, 12)))
    return vals[b], b


@dataclass
class TreeNode:
    """One branch of the policy tree, rooted at a slab start.

    ``mu`` is the belief entering the slab, ``value`` the expected remaining
    cost from here, ``U`` the per-state remaining cost under the tree policy,
    and ``lam`` the adjoint (Bayes-normalization correction applied at every
    downstream observation).  ``mu_path`` holds the belief at every grid node
    of the slab.
    """

    slab: int
    mu: np.ndarray
    actions: tuple
    value: float
    U: np.ndarray
    lam: np.ndarray
    mu_path: np.ndarray
    obs_control: Optional[int] = None
    mu_pre_obs: Optional[np.ndarray] = None
    likelihoods: Optional[np.ndarray] = None
    children: Optional[dict] = None

    def walk(self):
        yield self
        if self.children:
            for child in self.children.values():
                yield from child.walk()


def _forward(chain: FiniteChain, node: TreeNode) -> None:
    """Refresh beliefs below ``node`` from node.mu under the stored policy."""
    n, h = chain.slab_steps()[node.slab]
    path = np.empty((n + 1, chain.n_states))
    path[0] = node.mu
    for j, a in enumerate(node.actions):
        path[j + 1] = forward_belief_step(path[j], a, h, chain)
    node.mu_path = path
    if node.children is not None:
        node.mu_pre_obs = path[-1]
        liks = np.empty(chain.n_symbols)
        for o, child in node.children.items():
            post, L = bayes_jump(path[-1], o, node.obs_control, chain)
            liks[o] = L
            child.mu = post
            _forward(chain, child)
        node.likelihoods = liks


def _backward(chain: FiniteChain, node: TreeNode) -> bool:
    """Greedy backward sweep: re-pick actions and observation controls against
    the current beliefs, recompute U, lambda and the branch value.  Returns
    True when any decision changed."""
    n, h = chain.slab_steps()[node.slab]
    changed = False
    if node.children is None:
        U = chain.terminal_costs.copy()
        lam = chain.terminal_costs.copy()
        value = float(node.mu_path[-1] @ chain.terminal_costs)
    else:
        for child in node.children.values():
            changed |= _backward(chain, child)
        U_post = np.array([node.children[o].U for o in range(chain.n_symbols)])
        lam_post = np.array([node.children[o].lam for o in range(chain.n_symbols)])
        _, b = hamiltonian_discrete(node.mu_pre_obs, U_post, chain)
        if b != node.obs_control:
            node.obs_control = b
            changed = True
        U = u_jump(U_post, b, chain)
        lam = lambda_jump(lam_post, b, node.mu_pre_obs, chain)
        value = float(node.mu_pre_obs @ chain.impulse_costs[b]) \
            + sum(node.likelihoods[o] * node.children[o].value
                  for o in range(chain.n_symbols))
    actions = list(node.actions)
    for j in range(n - 1, -1, -1):
        _, a = hamiltonian_continuous(node.mu_path[j], U, chain)
        if a != actions[j]:
            actions[j] = a
            changed = True
        value += h * float(node.mu_path[j] @ chain.running_costs[a])
        U = backward_U_step(U, a, h, chain)
        lam = backward_U_step(lam, a, h, chain)
    node.actions = tuple(actions)
    node.U = U
    node.lam = lam
    node.value = value
    return changed


def _build_tree(chain: FiniteChain, slab: int) -> TreeNode:
    n_s = chain.n_states
    n, _ = chain.slab_steps()[slab]
    node = TreeNode(slab=slab, mu=np.full(n_s, 1.0 / n_s), actions=(0,) * n,
                    value=np.inf, U=np.zeros(n_s), lam=np.zeros(n_s),
                    mu_path=np.zeros((n + 1, n_s)))
    if slab < len(chain.slab_steps()) - 1:
        node.obs_control = 0
        node.children = {o: _build_tree(chain, slab + 1)
                         for o in range(chain.n_symbols)}
    return node


def exact_dp(chain: FiniteChain, mu0: np.ndarray,
             max_sweeps: int = 200) -> Tuple[float, TreeNode]:
    """Forward-backward fixed point over the observation-symbol tree.

    Beliefs flow forward under the current decisions; the backward sweep
    re-picks every action by minimizing the continuous Hamiltonian against the
    current (belief, cost-to-go) pair and every observation control by the
    discrete Hamiltonian.  Iterates until no decision changes, which on finite
    chains recovers the dynamic-programming solution checked against
    brute_force_value.
    """
    mu0 = np.asarray(mu0, dtype=float)
    if mu0.min() < 0 or abs(mu0.sum() - 1.0) > 1e-10:
        raise ValueError("mu0 must be a probability vector")
    n_branches = sum(chain.n_symbols ** k
                     for k in range(len(chain.obs_times) + 1))
    if n_branches > 100_000:
        raise OracleSizeError(f"{n_branches} tree branches; instance too large")
    root = _build_tree(chain, 0)
    root.mu = mu0
    for _ in range(max_sweeps):
        _forward(chain, root)
        if not _backward(chain, root):
            return root.value, root
    raise RuntimeError(f"policy tree did not stabilize in {max_sweeps} sweeps")


def brute_force_value(chain: FiniteChain, mu0: np.ndarray,
                      max_branches: int = 5_000_000) -> float:
    """Independent check of exact_dp: exhaustive search over per-branch action
    sequences and observation controls, on unnormalized beliefs so the symbol
    likelihood weighting is implicit."""
    mu0 = np.asarray(mu0, dtype=float)
    slabs = chain.slab_steps()
    if chain.n_actions ** max(n for n, _ in slabs) > max_branches:
        raise OracleSizeError("too many action sequences per slab")
    G_T = np.transpose(chain.generators, (0, 2, 1))

    def go(slab: int, mu: np.ndarray) -> float:
        n, h = slabs[slab]
        best = np.inf
        for seq in product(range(chain.n_actions), repeat=n):
            m = mu
            cost = 0.0
            for a in seq:
                cost += h * float(m @ chain.running_costs[a])
                m = m + h * (G_T[a] @ m)
            if slab == len(slabs) - 1:
                total = cost + float(m @ chain.terminal_costs)
            else:
                cont = np.inf
                for b in range(chain.n_obs_controls):
                    val = float(m @ chain.impulse_costs[b])
                    for o in range(chain.n_symbols):
                        w = m * chain.emissions[b][:, o]
                        if w.sum() > 0:
                            val += go(slab + 1, w)
                    cont = min(cont, val)
                total = cost + cont
            best = min(best, total)
        return best

    return go(0, mu0)


def fully_observed_values(chain: FiniteChain) -> List[np.ndarray]:
    """Per-state fully observed optimal cost at each slab start (time 0
    first), post-observation convention: entry k excludes the impulse at the
    slab's own start but includes all downstream impulses (charged at their
    minimum over controls)."""
    W = chain.terminal_costs.copy()
    slabs = chain.slab_steps()
    out = [W]
    for slab in range(len(slabs) - 1, -1, -1):
        n, h = slabs[slab]
        for _ in range(n):
            W = np.min([backward_U_step(W, a, h, chain)
                        for a in range(chain.n_actions)], axis=0)
        out.append(W)
        if slab > 0:
            W = W + chain.impulse_costs.min(axis=0)
    return out[::-1]


def fully_observed_bound(chain: FiniteChain) -> np.ndarray:
    """Per-state optimal cost at time zero when the state is always visible;
    its belief average lower-bounds the partially observed value (monotone
    Euler steps preserve the pointwise minimum inequality)."""
    return fully_observed_values(chain)[0]


def load_chain(path) -> FiniteChain:
    """Read an instance from JSON (matrices row-major)."""
    doc = json.loads(Path(path).read_text())
    return FiniteChain(
        generators=np.asarray(doc["generators"], dtype=float),
        running_costs=np.asarray(doc["running_costs"], dtype=float),
        emissions=np.asarray(doc["emissions"], dtype=float),
        impulse_costs=np.asarray(doc["impulse_costs"], dtype=float),
        terminal_costs=np.asarray(doc["terminal_costs"], dtype=float),
        horizon=float(doc["horizon"]),
        obs_times=tuple(doc["obs_times"]),
        dt=float(doc["dt"]),
    )
