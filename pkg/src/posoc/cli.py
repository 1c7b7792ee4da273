"""Command-line entry point: scenario ingestion, experiment orchestration,
persistence, and plot-data export.

Subcommands: train, evaluate, table1, noise-study, obstacle, oracle,
export-ansatz.  All outputs land under --out: report.json, per-experiment
CSVs (deterministic under fixed seeds), trained ansatz JSON, and a run log.
Exit codes: 0 success, 1 configuration error, 2 runtime failure, 3 invariant
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .model import (ConfigurationError, ControlProblem, LqgSpec, ObstacleSpec,
                    make_lqg_problem, make_obstacle_problem, obstacle_penalty,
                    uniform_obs_times)
from .lqg import (EvalDetail, evaluate_policy_detailed, fosoc_value,
                  riccati_solve, separation_policy)
from .sde import simulate_batch, build_grid
from .solver import TrainConfig, TrainingAborted, train, zero_policy
from . import finite

log = logging.getLogger("posoc")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_INVARIANT = 3


class InvariantFailure(RuntimeError):
    """A hard oracle invariant did not hold."""


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {"M_train": 500, "dt": 0.01, "n_outer": 30, "tol": 1e-3,
                   "ridge": 1e-6, "degree": 2, "seed": 0, "n_y_samples": 8,
                   "symmetrize": False}
_EVAL_DEFAULTS = {"M_eval": 100000, "seed": 123}


@dataclass
class Scenario:
    """A resolved scenario file: every field filled in, defaults applied."""

    id: str
    kind: str
    doc: dict
    horizon: float
    window_K: int
    obs_times: Optional[List[float]]
    n_obs: Optional[object]          # int or list of ints
    training: dict
    evaluation: dict

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(M_train=t["M_train"], dt=t["dt"],
                           n_outer=t["n_outer"], tol=t["tol"],
                           ridge=t["ridge"], degree=t["degree"],
                           window_K=self.window_K,
                           n_y_samples=t["n_y_samples"], seed=t["seed"],
                           symmetrize=t["symmetrize"])

    def resolve_obs_times(self, n_obs: Optional[int] = None) -> List[float]:
        if n_obs is not None:
            return list(uniform_obs_times(n_obs, self.horizon))
        if self.obs_times is not None:
            return list(self.obs_times)
        if isinstance(self.n_obs, int):
            return list(uniform_obs_times(self.n_obs, self.horizon))
        raise ConfigurationError(
            "scenario has an n_obs list; this command needs a single "
            "observation schedule (use obs_times or an integer n_obs)")

    def n_obs_list(self) -> List[int]:
        if isinstance(self.n_obs, list):
            return [int(n) for n in self.n_obs]
        if isinstance(self.n_obs, int):
            return [self.n_obs]
        return [len(self.obs_times)]

    # -- problem assembly --------------------------------------------------
    def lqg_spec(self, n_obs: int,
                 fixed_eps_override: Optional[float] = None) -> LqgSpec:
        d = self.doc
        kappa = d.get("kappa")
        if kappa is not None:
            kappa = np.asarray(kappa, dtype=float)
            if kappa.ndim == 2 and kappa.shape[0] == 1 and n_obs > 1:
                kappa = np.repeat(kappa, n_obs, axis=0)
        eps = fixed_eps_override if fixed_eps_override is not None \
            else d.get("fixed_eps")
        return LqgSpec(A=np.asarray(d["A"], dtype=float),
                       B=np.asarray(d["B"], dtype=float),
                       C=np.asarray(d["C"], dtype=float),
                       sigma=np.asarray(d["sigma"], dtype=float),
                       Q=np.asarray(d["Q"], dtype=float),
                       R=np.asarray(d["R"], dtype=float),
                       Q_T=np.asarray(d["Q_T"], dtype=float),
                       m0=np.asarray(d["m0"], dtype=float),
                       Sigma0=np.asarray(d["Sigma0"], dtype=float),
                       kappa=kappa, fixed_eps=eps)

    def obstacle_spec(self) -> ObstacleSpec:
        d = self.doc
        return ObstacleSpec(t_min=d["t_min"], t_max=d["t_max"],
                            r_in=d["r_in"], r_out=d["r_out"],
                            magnitude=d["magnitude"],
                            x_star=np.asarray(d["x_star"], dtype=float),
                            Q=np.asarray(d["Q"], dtype=float),
                            Q_T=np.asarray(d["Q_T"], dtype=float),
                            R=np.asarray(d["R"], dtype=float),
                            sigma=np.asarray(d["sigma"], dtype=float),
                            C=np.asarray(d["C"], dtype=float),
                            m0=np.asarray(d["m0"], dtype=float),
                            Sigma0=np.asarray(d["Sigma0"], dtype=float),
                            fixed_eps=d.get("fixed_eps", 0.1))

    def build_problem(self, obs_times: Sequence[float],
                      fixed_eps_override: Optional[float] = None) -> ControlProblem:
        if self.kind == "lqg":
            spec = self.lqg_spec(len(obs_times), fixed_eps_override)
            grid = None
            if fixed_eps_override is None and spec.fixed_eps is None:
                grid = self.doc.get("beta_grid")
            return make_lqg_problem(spec, obs_times, self.horizon,
                                    beta_grid=grid)
        spec = self.obstacle_spec()
        return make_obstacle_problem(spec, obs_times, self.horizon,
                                     alpha_grid=self.doc.get("alpha_grid"),
                                     alpha_bound=self.doc.get("alpha_bound"))


def load_scenario(path, seed_override: Optional[int] = None) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("scenario file must hold a JSON object")
    kind = doc.get("kind")
    if kind not in ("lqg", "obstacle"):
        raise ConfigurationError(f"unknown scenario kind: {kind!r}")
    required = {"lqg": ["A", "B", "C", "sigma", "Q", "R", "Q_T", "m0",
                        "Sigma0", "horizon"],
                "obstacle": ["t_min", "t_max", "r_in", "r_out", "magnitude",
                             "x_star", "Q", "Q_T", "R", "sigma", "C", "m0",
                             "Sigma0", "horizon"]}[kind]
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigurationError(f"scenario is missing fields: {missing}")
    if "obs_times" not in doc and "n_obs" not in doc:
        raise ConfigurationError("scenario needs obs_times or n_obs")
    training = {**_TRAIN_DEFAULTS, **doc.get("training", {})}
    evaluation = {**_EVAL_DEFAULTS, **doc.get("evaluation", {})}
    if seed_override is not None:
        training["seed"] = int(seed_override)
    resolved = dict(doc)
    resolved["training"] = training
    resolved["evaluation"] = evaluation
    resolved.setdefault("window_K", 1)
    return Scenario(id=str(doc.get("id", Path(path).stem)), kind=kind,
                    doc=resolved, horizon=float(doc["horizon"]),
                    window_K=int(resolved["window_K"]),
                    obs_times=doc.get("obs_times"), n_obs=doc.get("n_obs"),
                    training=training, evaluation=evaluation)


# ---------------------------------------------------------------------------
# reports and persistence
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    scenario_id: str
    method: str
    mean_cost: float
    ci95: float
    cost_to_go: List[List[float]]     # [t, mean remaining cost] rows
    runtime_s: float
    seeds: dict
    config_hash: str
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"scenario_id": self.scenario_id, "method": self.method,
             "mean_cost": self.mean_cost, "ci95": self.ci95,
             "cost_to_go": self.cost_to_go, "runtime_s": self.runtime_s,
             "seeds": self.seeds, "config_hash": self.config_hash}
        d.update(self.extra)
        return d


def report_from_detail(scenario: Scenario, method: str, detail: EvalDetail,
                       runtime_s: float, train_seed: Optional[int]) -> ExperimentReport:
    curve = [[float(t), float(v)]
             for t, v in zip(detail.grid.times, detail.cost_to_go)]
    seeds = {"evaluation": scenario.evaluation["seed"]}
    if train_seed is not None:
        seeds["training"] = train_seed
    extra = {}
    if detail.extra_mean is not None:
        extra = {"occupancy_mean": detail.extra_mean,
                 "occupancy_ci95": detail.extra_ci95}
    return ExperimentReport(scenario_id=scenario.id, method=method,
                            mean_cost=detail.mean, ci95=detail.ci95,
                            cost_to_go=curve, runtime_s=runtime_s,
                            seeds=seeds, config_hash=scenario.config_hash,
                            extra=extra)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    log.info("wrote %s", path)


def write_report(out: Path, reports: List[ExperimentReport],
                 errors: Optional[List[dict]] = None) -> None:
    doc = {"reports": [r.to_dict() for r in reports]}
    if errors:
        doc["errors"] = errors
    (out / "report.json").write_text(json.dumps(doc, indent=1))
    log.info("wrote %s", out / "report.json")


def write_cost_to_go(out: Path, name: str, report: ExperimentReport) -> None:
    write_csv(out / name, ["t", "mean_remaining_cost"], report.cost_to_go)


def _setup_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    if not any(isinstance(h, logging.StreamHandler)
               and not isinstance(h, logging.FileHandler) for h in log.handlers):
        log.addHandler(logging.StreamHandler(sys.stderr))
    return out


# ---------------------------------------------------------------------------
# shared experiment steps
# ---------------------------------------------------------------------------

def _train_and_eval(scenario: Scenario, problem: ControlProblem,
                    extra_step_stat=None):
    """Train on the problem, evaluate at the scenario's evaluation settings;
    returns (ansatz, policy, history, detail, runtime seconds)."""
    cfg = scenario.train_config()
    t0 = time.perf_counter()
    ansatz, policy, history = train(problem, cfg)
    detail = evaluate_policy_detailed(problem, policy,
                                      scenario.evaluation["M_eval"], cfg.dt,
                                      scenario.evaluation["seed"],
                                      extra_step_stat=extra_step_stat)
    return ansatz, policy, history, detail, time.perf_counter() - t0


def _evaluate(scenario: Scenario, problem: ControlProblem, policy,
              extra_step_stat=None) -> EvalDetail:
    return evaluate_policy_detailed(problem, policy,
                                    scenario.evaluation["M_eval"],
                                    scenario.training["dt"],
                                    scenario.evaluation["seed"],
                                    extra_step_stat=extra_step_stat)


def _history_rows(history):
    return [[i, c, ci, d] for i, (c, ci, d) in
            enumerate(zip(history.costs, history.ci95, history.theta_deltas))]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    out = _setup_out(args)
    scenario = load_scenario(args.scenario, args.seed)
    obs_times = scenario.resolve_obs_times()
    problem = scenario.build_problem(obs_times)
    log.info("training scenario %s (config %s)", scenario.id,
             scenario.config_hash[:12])
    ansatz, policy, history, detail, rt = _train_and_eval(scenario, problem)
    ansatz.save(out / "ansatz.json")
    log.info("wrote %s", out / "ansatz.json")
    write_csv(out / "history.csv",
              ["iteration", "cost", "ci95", "theta_delta"],
              _history_rows(history))
    report = report_from_detail(scenario, "particle", detail, rt,
                                scenario.training["seed"])
    report.extra["converged"] = history.converged
    report.extra["best_iteration"] = history.best_iteration
    write_cost_to_go(out, "cost_to_go_particle.csv", report)
    write_report(out, [report])
    log.info("trained cost %.4f +- %.4f", detail.mean, detail.ci95)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _setup_out(args)
    scenario = load_scenario(args.scenario, args.seed)
    obs_times = scenario.resolve_obs_times()
    problem = scenario.build_problem(obs_times)
    t0 = time.perf_counter()
    train_seed = None
    if args.policy == "trained":
        _, policy, _, detail, rt = _train_and_eval(scenario, problem)
        train_seed = scenario.training["seed"]
    else:
        if args.policy == "separation":
            if scenario.kind != "lqg":
                raise ConfigurationError("separation policy needs an LQG scenario")
            spec = scenario.lqg_spec(len(obs_times))
            ricc = riccati_solve(spec.A, spec.B, spec.Q, spec.R, spec.Q_T,
                                 scenario.horizon)
            policy = separation_policy(spec, ricc, obs_times,
                                       scenario.training["dt"])
        else:
            policy = zero_policy(problem, scenario.window_K)
        detail = _evaluate(scenario, problem, policy)
        rt = time.perf_counter() - t0
    report = report_from_detail(scenario, args.policy, detail, rt, train_seed)
    write_cost_to_go(out, f"cost_to_go_{args.policy}.csv", report)
    write_report(out, [report])
    log.info("%s cost %.4f +- %.4f", args.policy, detail.mean, detail.ci95)
    return EXIT_OK


def cmd_table1(args) -> int:
    out = _setup_out(args)
    scenario = load_scenario(args.scenario, args.seed)
    if scenario.kind != "lqg":
        raise ConfigurationError("table1 needs an LQG scenario")
    if scenario.doc.get("fixed_eps") is None:
        raise ConfigurationError("table1 needs a fixed observation noise level")
    spec0 = scenario.lqg_spec(1)
    ricc = riccati_solve(spec0.A, spec0.B, spec0.Q, spec0.R, spec0.Q_T,
                         scenario.horizon)
    fosoc = fosoc_value(spec0, scenario.horizon, ricc)
    log.info("fully observed benchmark %.4f", fosoc)
    rows, reports, errors = [], [], []
    M_eval = scenario.evaluation["M_eval"]
    eval_seed = scenario.evaluation["seed"]
    for n_obs in scenario.n_obs_list():
        obs_times = scenario.resolve_obs_times(n_obs)
        problem = scenario.build_problem(obs_times)
        spec = scenario.lqg_spec(n_obs)
        t0 = time.perf_counter()
        sep = separation_policy(spec, ricc, obs_times, scenario.training["dt"])
        d_sep = _evaluate(scenario, problem, sep)
        r_sep = report_from_detail(scenario, "separation", d_sep,
                                   time.perf_counter() - t0, None)
        r_sep.extra["n_obs"] = n_obs
        reports.append(r_sep)
        write_cost_to_go(out, f"cost_to_go_no{n_obs}_separation.csv", r_sep)
        rows.append([scenario.id, n_obs, "separation", d_sep.mean, d_sep.ci95,
                     M_eval, eval_seed])
        try:
            _, _, history, d_par, rt = _train_and_eval(scenario, problem)
        except TrainingAborted as exc:
            log.error("training failed for N_o=%d: %s", n_obs, exc)
            errors.append({"n_obs": n_obs, "method": "particle",
                           "error": str(exc)})
        else:
            r_par = report_from_detail(scenario, "particle", d_par, rt,
                                       scenario.training["seed"])
            r_par.extra["n_obs"] = n_obs
            reports.append(r_par)
            write_cost_to_go(out, f"cost_to_go_no{n_obs}_particle.csv", r_par)
            rows.append([scenario.id, n_obs, "particle", d_par.mean,
                         d_par.ci95, M_eval, eval_seed])
            log.info("N_o=%d particle %.4f +- %.4f vs separation %.4f +- %.4f",
                     n_obs, d_par.mean, d_par.ci95, d_sep.mean, d_sep.ci95)
        rows.append([scenario.id, n_obs, "fosoc", fosoc, 0.0, 0, eval_seed])
    write_csv(out / "table1.csv",
              ["scenario", "N_o", "method", "mean_cost", "ci95", "M_eval",
               "seed"], rows)
    write_report(out, reports, errors)
    return EXIT_OK


def cmd_noise_study(args) -> int:
    out = _setup_out(args)
    scenario = load_scenario(args.scenario, args.seed)
    if scenario.kind != "lqg":
        raise ConfigurationError("noise-study needs an LQG scenario")
    beta_grid = scenario.doc.get("beta_grid")
    if not beta_grid:
        raise ConfigurationError("noise-study needs a beta candidate grid")
    obs_times = scenario.resolve_obs_times()
    rows, reports, errors = [], [], []
    M_eval = scenario.evaluation["M_eval"]
    eval_seed = scenario.evaluation["seed"]
    for cand in beta_grid:
        level = float(np.atleast_1d(np.asarray(cand, dtype=float))[0])
        problem = scenario.build_problem(obs_times, fixed_eps_override=level)
        try:
            _, _, _, detail, rt = _train_and_eval(scenario, problem)
        except TrainingAborted as exc:
            log.error("training failed for beta=%g: %s", level, exc)
            errors.append({"beta": level, "error": str(exc)})
            continue
        r = report_from_detail(scenario, f"fixed_beta_{level:g}", detail, rt,
                               scenario.training["seed"])
        reports.append(r)
        write_cost_to_go(out, f"cost_to_go_beta_{level:g}.csv", r)
        rows.append([scenario.id, level, "fixed", detail.mean, detail.ci95,
                     M_eval, eval_seed])
        log.info("fixed beta=%g cost %.4f +- %.4f", level, detail.mean,
                 detail.ci95)
    problem = scenario.build_problem(obs_times)
    if problem.fixed_beta is not None:
        raise ConfigurationError(
            "scenario fixes the observation noise; drop fixed_eps to train "
            "the adaptive policy")
    try:
        _, _, _, detail, rt = _train_and_eval(scenario, problem)
    except TrainingAborted as exc:
        log.error("adaptive training failed: %s", exc)
        errors.append({"beta": "adaptive", "error": str(exc)})
    else:
        r = report_from_detail(scenario, "adaptive_beta", detail, rt,
                               scenario.training["seed"])
        reports.append(r)
        write_cost_to_go(out, "cost_to_go_adaptive.csv", r)
        rows.append([scenario.id, "", "adaptive", detail.mean, detail.ci95,
                     M_eval, eval_seed])
        log.info("adaptive beta cost %.4f +- %.4f", detail.mean, detail.ci95)
    write_csv(out / "noise_study.csv",
              ["scenario", "beta", "method", "mean_cost", "ci95", "M_eval",
               "seed"], rows)
    write_report(out, reports, errors)
    return EXIT_OK


def _dump_trajectories(out: Path, problem: ControlProblem, policy,
                       scenario: Scenario, n_traj: int) -> None:
    grid = build_grid(problem.obs_times, problem.horizon,
                      scenario.training["dt"])
    res = simulate_batch(problem, policy, grid,
                         scenario.evaluation["seed"] + 1, 0, n_traj,
                         record_states=True, record_alphas=True)
    remaining = res.remaining_costs()
    totals = res.total_costs
    d_x, d_alpha = problem.dim_x, problem.dim_alpha
    rows = []
    for m in range(n_traj):
        for k, t in enumerate(grid.times):
            alpha = res.alphas[m, k] if k < len(grid.times) - 1 \
                else [""] * d_alpha
            rows.append([m, float(t), *res.states[m, k], *alpha,
                         float(totals[m] - remaining[m, k])])
    write_csv(out / "trajectories.csv",
              ["trajectory_id", "t", *(f"x_{i+1}" for i in range(d_x)),
               *(f"alpha_{i+1}" for i in range(d_alpha)), "cumulative_cost"],
              rows)
    obs_rows = []
    for m in range(n_traj):
        for n, t_n in enumerate(problem.obs_times):
            obs_rows.append([m, n + 1, float(t_n), *res.observations[m, n],
                             *res.betas[m, n]])
    write_csv(out / "observations.csv",
              ["trajectory_id", "n", "t_n",
               *(f"y_{i+1}" for i in range(problem.dim_y)),
               *(f"beta_{i+1}" for i in range(problem.dim_beta))], obs_rows)
    if d_x >= 2:
        norm_rows = []
        for m in range(n_traj):
            for k, t in enumerate(grid.times):
                norm_rows.append([m, float(t),
                                  float(np.linalg.norm(res.states[m, k])),
                                  float(totals[m] - remaining[m, k])])
        write_csv(out / "trajectory_norms.csv",
                  ["trajectory_id", "t", "x_norm", "cumulative_cost"],
                  norm_rows)


def cmd_obstacle(args) -> int:
    out = _setup_out(args)
    scenario = load_scenario(args.scenario, args.seed)
    if scenario.kind != "obstacle":
        raise ConfigurationError("obstacle needs an obstacle scenario")
    obs_times = scenario.resolve_obs_times()
    problem = scenario.build_problem(obs_times)
    spec = scenario.obstacle_spec()

    def occupancy(t, x, alpha):
        return (obstacle_penalty(t, x, spec) > 0).astype(float)

    _, policy, history, d_tr, rt = _train_and_eval(scenario, problem,
                                                   extra_step_stat=occupancy)
    t0 = time.perf_counter()
    d_zero = _evaluate(scenario, problem, zero_policy(problem, scenario.window_K),
                       extra_step_stat=occupancy)
    r_tr = report_from_detail(scenario, "particle", d_tr, rt,
                              scenario.training["seed"])
    r_zero = report_from_detail(scenario, "zero_control", d_zero,
                                time.perf_counter() - t0, None)
    write_cost_to_go(out, "cost_to_go_particle.csv", r_tr)
    write_cost_to_go(out, "cost_to_go_zero.csv", r_zero)
    rows = [[scenario.id, r.method, r.mean_cost, r.ci95,
             r.extra["occupancy_mean"], r.extra["occupancy_ci95"],
             scenario.evaluation["M_eval"], scenario.evaluation["seed"]]
            for r in (r_tr, r_zero)]
    write_csv(out / "obstacle.csv",
              ["scenario", "method", "mean_cost", "ci95", "occupancy_mean",
               "occupancy_ci95", "M_eval", "seed"], rows)
    _dump_trajectories(out, problem, policy, scenario, n_traj=args.n_dump)
    write_report(out, [r_tr, r_zero])
    log.info("trained %.2f +- %.2f (occupancy %.4f) vs zero %.2f +- %.2f "
             "(occupancy %.4f)", d_tr.mean, d_tr.ci95, d_tr.extra_mean,
             d_zero.mean, d_zero.ci95, d_zero.extra_mean)
    return EXIT_OK


def run_oracle_checks(chain: finite.FiniteChain, mu0: np.ndarray,
                      tol: float = 1e-10) -> dict:
    """Execute the hard oracle invariants; raises InvariantFailure on any
    violation.  The argmin-agreement check is soft (reported only)."""
    V0, root = finite.exact_dp(chain, mu0)
    bf = finite.brute_force_value(chain, mu0)
    fo = finite.fully_observed_values(chain)
    results = {"V0": V0, "brute_force": bf, "dp_vs_brute_force": abs(V0 - bf)}
    if abs(V0 - bf) > tol:
        raise InvariantFailure(
            f"exact DP value {V0!r} differs from enumeration {bf!r}")
    env_err, pair_err, fo_gap = 0.0, 0.0, 0.0
    argmin_disagreements = 0
    for node in root.walk():
        env_err = max(env_err, abs(node.value - float(node.mu @ node.U)))
        fo_gap = max(fo_gap, float(np.max(fo[node.slab] - node.U)))
        if node.children is not None:
            lam_post = np.array([node.children[o].lam
                                 for o in range(chain.n_symbols)])
            U_post = np.array([node.children[o].U
                               for o in range(chain.n_symbols)])
            lam_pre = finite.lambda_jump(lam_post, node.obs_control,
                                         node.mu_pre_obs, chain)
            c = chain.impulse_costs[node.obs_control]
            pair_err = max(pair_err,
                           abs(float(node.mu_pre_obs @ lam_pre)
                               - float(node.mu_pre_obs @ c)))
            _, b_u = finite.hamiltonian_discrete(node.mu_pre_obs, U_post, chain)
            _, b_l = finite.hamiltonian_discrete(node.mu_pre_obs, lam_post, chain)
            if b_u != b_l:
                argmin_disagreements += 1
    results.update({"envelope_error": env_err, "pairing_error": pair_err,
                    "fully_observed_gap": fo_gap,
                    "argmin_disagreements": argmin_disagreements})
    if env_err > tol:
        raise InvariantFailure(f"envelope identity violated by {env_err:g}")
    if pair_err > tol:
        raise InvariantFailure(f"adjoint pairing violated by {pair_err:g}")
    if fo_gap > tol:
        raise InvariantFailure(
            f"fully observed bound violated by {fo_gap:g}")
    return results


def cmd_oracle(args) -> int:
    out = _setup_out(args)
    try:
        chain = finite.load_chain(args.scenario)
    except (FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigurationError(f"invalid chain instance: {exc}") from exc
    mu0 = np.full(chain.n_states, 1.0 / chain.n_states)
    results = run_oracle_checks(chain, mu0)
    log.info("oracle invariants passed: %s", results)
    _, root = finite.exact_dp(chain, mu0)
    rows = []
    for i, node in enumerate(root.walk()):
        rows.append([i, node.slab, node.value,
                     "" if node.obs_control is None else node.obs_control,
                     *node.mu, *node.U, *node.lam])
    n_s = chain.n_states
    write_csv(out / "tree.csv",
              ["node", "slab", "value", "obs_control",
               *(f"mu_{s}" for s in range(n_s)),
               *(f"U_{s}" for s in range(n_s)),
               *(f"lambda_{s}" for s in range(n_s))], rows)
    (out / "report.json").write_text(json.dumps(
        {"oracle": results, "n_states": chain.n_states,
         "n_actions": chain.n_actions}, indent=1))
    log.info("wrote %s", out / "report.json")
    return EXIT_OK


def cmd_export_ansatz(args) -> int:
    out = _setup_out(args)
    scenario = load_scenario(args.scenario, args.seed)
    obs_times = scenario.resolve_obs_times()
    problem = scenario.build_problem(obs_times)
    ansatz, _, history = train(problem, scenario.train_config())
    ansatz.save(out / "ansatz.json")
    log.info("wrote %s (%d iterations, converged=%s)", out / "ansatz.json",
             history.n_iterations, history.converged)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posoc",
                     description="Partially observed stochastic control "
                                 "experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="scenario JSON path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the training seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="advisory BLAS thread cap")

    p = sub.add_parser("train", help="train a policy on one scenario")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a policy by Monte Carlo")
    common(p)
    p.add_argument("--policy", choices=["trained", "separation", "zero"],
                   default="trained")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("table1", help="particle vs separation benchmark sweep")
    common(p)
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("noise-study",
                       help="fixed noise levels vs the adaptive policy")
    common(p)
    p.set_defaults(func=cmd_noise_study)

    p = sub.add_parser("obstacle", help="obstacle benchmark vs zero control")
    common(p)
    p.add_argument("--n-dump", type=int, default=20,
                   help="trajectories in the rollout dump")
    p.set_defaults(func=cmd_obstacle)

    p = sub.add_parser("oracle", help="finite-state oracle invariant suite")
    common(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("export-ansatz", help="train and export the value "
                                             "coefficients as JSON")
    common(p)
    p.set_defaults(func=cmd_export_ansatz)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_CONFIG
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantFailure as exc:
        log.error("invariant failure: %s", exc)
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:  # runtime failures: training, simulation, IO
        log.error("runtime failure: %s", exc)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
