"""Polynomial feature bases over (state, observation window), ridge-regularized
least squares, and the per-time-node value ansatz with JSON persistence.

The monomial order is graded-lexicographic (total degree first, then lex with
the state block leading) and is part of the serialization contract.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model import WindowState

__all__ = [
    "FeatureBasis",
    "ValueAnsatz",
    "feature_map",
    "least_squares_fit",
    "fit_value_ansatz",
    "RankDeficiencyWarning",
]


class RankDeficiencyWarning(UserWarning):
    pass


def _monomial_exponents(n_vars: int, degree: int) -> np.ndarray:
    """Exponent rows in graded-lex order; the constant monomial comes first."""
    rows = []
    for d in range(degree + 1):
        for combo in combinations_with_replacement(range(n_vars), d):
            e = np.zeros(n_vars, dtype=int)
            for i in combo:
                e[i] += 1
            rows.append(e)
    return np.array(rows, dtype=int)


@dataclass(frozen=True)
class FeatureBasis:
    """Monomials up to ``degree`` over the concatenated (x, z) input.

    ``dim_x`` is the size of the state block; the remaining ``input_dim -
    dim_x`` coordinates are the flattened observation window.  With
    ``include_cross`` off, monomials mixing the two blocks are dropped.
    """

    degree: int
    input_dim: int
    dim_x: int
    include_cross: bool = True
    exponents: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.dim_x <= self.input_dim:
            raise ValueError("dim_x must be between 0 and input_dim")
        exps = _monomial_exponents(self.input_dim, self.degree)
        if not self.include_cross:
            in_x = exps[:, :self.dim_x].sum(axis=1) > 0
            in_z = exps[:, self.dim_x:].sum(axis=1) > 0
            exps = exps[~(in_x & in_z)]
        object.__setattr__(self, "exponents", exps)

    @property
    def n_features(self) -> int:
        return len(self.exponents)

    def evaluate(self, inputs: np.ndarray) -> np.ndarray:
        """Feature matrix for inputs of shape (M, input_dim) or (input_dim,)."""
        u = np.atleast_2d(np.asarray(inputs, dtype=float))
        if u.shape[1] != self.input_dim:
            raise ValueError(f"expected input dimension {self.input_dim}, got {u.shape[1]}")
        out = np.ones((u.shape[0], self.n_features))
        for f, e in enumerate(self.exponents):
            for i in np.nonzero(e)[0]:
                out[:, f] *= u[:, i] ** e[i]
        return out

    def _find(self, e: np.ndarray) -> int:
        hits = np.nonzero((self.exponents == e).all(axis=1))[0]
        return int(hits[0]) if len(hits) else -1

    def derivative_table(self, var: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(source feature, reduced feature, coefficient) triples for d/du_var."""
        src, dst, coef = [], [], []
        for f, e in enumerate(self.exponents):
            if e[var] == 0:
                continue
            r = e.copy()
            r[var] -= 1
            j = self._find(r)
            if j < 0:
                continue  # only possible with include_cross off; reduced term absent
            src.append(f)
            dst.append(j)
            coef.append(float(e[var]))
        return np.array(src, dtype=int), np.array(dst, dtype=int), np.array(coef)


def feature_map(x: np.ndarray, z, basis: FeatureBasis) -> np.ndarray:
    """Features of a single (state, window) pair; short windows are zero-padded
    at the front.  The first entry is the constant 1."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dim_z = basis.input_dim - basis.dim_x
    if isinstance(z, WindowState):
        if dim_z % z.K != 0:
            raise ValueError("window capacity incompatible with basis input_dim")
        zf = z.flatten(dim_z // z.K)
    else:
        zf = np.zeros(0) if z is None else np.atleast_1d(np.asarray(z, dtype=float))
        if len(zf) < dim_z:
            zf = np.concatenate([np.zeros(dim_z - len(zf)), zf])
    u = np.concatenate([x, zf])
    if len(u) != basis.input_dim:
        raise ValueError(f"flattened (x, z) has dimension {len(u)}, "
                         f"expected {basis.input_dim}")
    return basis.evaluate(u)[0]


def least_squares_fit(features: np.ndarray, targets: np.ndarray,
                      ridge: float = 0.0) -> np.ndarray:
    """argmin_theta ||Phi theta - P||^2 + ridge ||theta||^2 via an augmented
    QR-based least-squares solve.  With ridge == 0 and a rank-deficient design
    the minimum-norm solution is returned and a RankDeficiencyWarning issued."""
    phi = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if ridge > 0:
        F = phi.shape[1]
        phi_aug = np.vstack([phi, np.sqrt(ridge) * np.eye(F)])
        y_aug = np.concatenate([y, np.zeros(F)])
        theta, *_ = np.linalg.lstsq(phi_aug, y_aug, rcond=None)
        return theta
    theta, _, rank, _ = np.linalg.lstsq(phi, y, rcond=None)
    if rank < phi.shape[1]:
        warnings.warn(f"rank-deficient design (rank {rank} < {phi.shape[1]}); "
                      "returning the minimum-norm solution", RankDeficiencyWarning)
    return theta


def _standardized_fit(phi: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """Ridge fit with internal column standardization, coefficients mapped back
    to the raw monomial basis.  The constant column is neither scaled nor
    penalized."""
    mu = phi[:, 1:].mean(axis=0)
    sd = phi[:, 1:].std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    phis = np.empty_like(phi)
    phis[:, 0] = 1.0
    phis[:, 1:] = (phi[:, 1:] - mu) / sd
    F = phi.shape[1]
    lam = np.sqrt(ridge) * np.eye(F)
    lam[0, 0] = 0.0
    theta_s, *_ = np.linalg.lstsq(np.vstack([phis, lam]),
                                  np.concatenate([y, np.zeros(F)]), rcond=None)
    theta = np.empty(F)
    theta[1:] = theta_s[1:] / sd
    theta[0] = theta_s[0] - np.sum(theta_s[1:] * mu / sd)
    return theta


@dataclass
class ValueAnsatz:
    """One coefficient vector per time node over a shared feature basis."""

    time_nodes: np.ndarray       # (n_nodes,)
    theta: np.ndarray            # (n_nodes, F)
    basis: FeatureBasis

    def __post_init__(self):
        self.time_nodes = np.asarray(self.time_nodes, dtype=float)
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if self.theta.shape != (len(self.time_nodes), self.basis.n_features):
            raise ValueError("theta must have one row per time node")

    @classmethod
    def zeros(cls, time_nodes: Sequence[float], basis: FeatureBasis) -> "ValueAnsatz":
        return cls(np.asarray(time_nodes, dtype=float),
                   np.zeros((len(time_nodes), basis.n_features)), basis)

    def evaluate(self, node: int, inputs: np.ndarray) -> np.ndarray:
        return self.basis.evaluate(inputs) @ self.theta[node]

    def gradient_x(self, node: int, inputs: np.ndarray) -> np.ndarray:
        """Exact gradient of the polynomial in the state block, shape (M, d_x)."""
        feats = self.basis.evaluate(inputs)
        M = feats.shape[0]
        g = np.zeros((M, self.basis.dim_x))
        th = self.theta[node]
        for i in range(self.basis.dim_x):
            src, dst, coef = self._dtable(i)
            if len(src):
                g[:, i] = feats[:, dst] @ (coef * th[src])
        return g

    def generator_term(self, node: int, inputs: np.ndarray,
                       drift: np.ndarray, sig_sq: np.ndarray) -> np.ndarray:
        """drift . grad p + tr(sigma sigma' hess p)/2, exact for polynomials."""
        g = self.gradient_x(node, inputs)
        out = np.sum(np.atleast_2d(drift) * g, axis=-1)
        feats = self.basis.evaluate(inputs)
        th = self.theta[node]
        d_x = self.basis.dim_x
        for i in range(d_x):
            for j in range(d_x):
                w = sig_sq[i, j]
                if w == 0.0:
                    continue
                src1, dst1, coef1 = self._dtable(i)
                if not len(src1):
                    continue
                # second reduction on variable j of the already-reduced monomials
                src2, dst2, coef2 = self._dtable(j)
                red = {int(s): (int(d), c) for s, d, c in zip(src2, dst2, coef2)}
                for s1, d1, c1 in zip(src1, dst1, coef1):
                    if int(d1) in red:
                        d2, c2 = red[int(d1)]
                        out += 0.5 * w * c1 * c2 * th[s1] * feats[:, d2]
        return out

    def _dtable(self, var: int):
        cache = getattr(self, "_dtables", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_dtables", cache)
        if var not in cache:
            cache[var] = self.basis.derivative_table(var)
        return cache[var]

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "basis": {
                "degree": self.basis.degree,
                "input_dim": self.basis.input_dim,
                "dim_x": self.basis.dim_x,
                "include_cross": self.basis.include_cross,
            },
            "time_nodes": self.time_nodes.tolist(),
            "theta": [row.tolist() for row in self.theta],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ValueAnsatz":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ValueError(f"unsupported ansatz file version {doc.get('version')}")
        b = doc["basis"]
        basis = FeatureBasis(degree=b["degree"], input_dim=b["input_dim"],
                             dim_x=b["dim_x"], include_cross=b["include_cross"])
        return cls(np.asarray(doc["time_nodes"]), np.asarray(doc["theta"]), basis)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ValueAnsatz":
        return cls.from_json(Path(path).read_text())


def fit_value_ansatz(samples: Sequence, basis: FeatureBasis,
                     ridge: float) -> ValueAnsatz:
    """Fit one coefficient vector per node from (inputs, targets) sample sets.

    ``samples`` is a sequence of (time, inputs (M, input_dim), targets (M,))
    triples.  Features are standardized per node before the ridge solve and
    the coefficients are mapped back to the raw basis."""
    nodes = []
    thetas = []
    for k, (t, inputs, targets) in enumerate(samples):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        targets = np.asarray(targets, dtype=float)
        if inputs.shape[0] == 0:
            raise ValueError(f"no samples at node {k} (t={t:g})")
        phi = basis.evaluate(inputs)
        thetas.append(_standardized_fit(phi, targets, ridge))
        nodes.append(float(t))
    return ValueAnsatz(np.asarray(nodes), np.vstack(thetas), basis)
