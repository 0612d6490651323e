"""
Experiment harness: configuration, logging setup and the four CSV-producing commands.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .artifacts import save_json, write_csv
from .core import ConstraintSpec, LayeredProblem, make_problem, rollout, sample_system
from .dual import (DualLearnConfig, recommended_constants, run_exact_dual_learning, wishart_bound,
                   wishart_deviation)
from .errors import ConfigurationError, LayeredError
from .oracle import build_oracle, kkt_brute_force, optimal_tracking, plan_reference
from .perturbation import PerturbationSpec, run_perturbed_dual_learning
from .pipeline import (LayeredConfig, LayeredResult, PipelineMetrics, evaluation_set, run_layered_actor_critic,
                       write_metrics_csv)
from .tracking import TrackingConfig

logger = logging.getLogger(__name__)

COMMANDS = ("verify-theory", "lqr-table", "rho-sweep", "clqr")

IDENTITY_TOL = 1e-8
ROLLOUT_TOL = 1e-10
KKT_TOL = 1e-6
RHO_CHOICES = (0.5, 1.0, 2.0, 4.0, 8.0)
WISHART_CASES = ((1, 1), (2, 8), (4, 64))

IDENTITY_HEADER = ["instance", "seed", "dx", "du", "T", "rho", "p_min_eig", "h_max_eig",
                   "fixed_point_residual", "rollout_residual", "kkt_dual_error", "passed"]
WISHART_HEADER = ["dx", "B", "trials", "estimate", "bound", "passed"]
THETA_TRACE_HEADER = ["system", "eps", "iter", "theta_err_spectral", "theta_err_frobenius", "bound"]
LQR_HEADER = ["dx", "du", "seed", "relative_cost", "mean_deviation", "relative_cost_nodual",
              "mean_deviation_nodual", "diverged"]
RHO_HEADER = ["rho", "dx", "du", "seed", "relative_cost", "mean_deviation", "diverged"]
CLQR_HEADER = ["dx", "du", "seed", "relative_cost", "mean_violation", "mean_deviation",
               "relative_cost_nodual", "mean_violation_nodual", "mean_deviation_nodual", "diverged"]


@dataclass
class ExperimentConfig:
    d_x: int = 2
    d_u: int = 2
    T: int = 20
    q_weight: float = 1.0
    r_weight: float = 0.01
    rho: float = 2.0
    rho_values: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0, 8.0])
    eta: Union[float, str] = "auto"
    B: int = 5
    K: int = 200
    freeze: int = 100
    update_every: int = 10
    episodes: int = 20
    noise_std: float = 0.01
    explore_std: float = 1.0
    window: Optional[int] = None
    time_varying: bool = True
    dual_kind: str = "linear"
    hidden: int = 128
    eval_count: int = 50
    seed: int = 0
    n_systems: int = 10
    spectral_radius: float = 1.0
    constraint_bound: Optional[float] = None
    free_initial: bool = True
    oracle_tracking: bool = False
    identity_instances: int = 200
    wishart_trials: int = 10_000
    eps_levels: List[float] = field(default_factory=lambda: [0.0, 1e-3, 1e-2])
    output_path: str = "results"

    def __post_init__(self):
        if self.constraint_bound is not None:
            try:
                self.constraint_bound = float(self.constraint_bound)
            except (TypeError, ValueError) as e:
                raise ConfigurationError(f"constraint_bound must be a number, got {self.constraint_bound!r}") from e
            if math.isinf(self.constraint_bound) and self.constraint_bound < 0:
                self.constraint_bound = None
        if isinstance(self.eta, str) and self.eta != "auto":
            raise ConfigurationError(f"eta must be a positive number or 'auto', got {self.eta!r}")
        if not isinstance(self.eta, str) and not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        for name in ("d_x", "d_u", "T", "B", "K", "update_every", "hidden", "eval_count", "n_systems",
                     "identity_instances", "wishart_trials"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("freeze", "episodes"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.rho <= 0 or any(r <= 0 for r in self.rho_values):
            raise ConfigurationError("penalty values must be positive")
        if self.spectral_radius <= 0:
            raise ConfigurationError(f"spectral_radius must be positive, got {self.spectral_radius}")
        if any(e < 0 for e in self.eps_levels):
            raise ConfigurationError("perturbation levels must be nonnegative")

    @property
    def out_dir(self) -> Path:
        return Path(self.output_path)


COMMAND_DEFAULTS: Dict[str, Dict] = {
    "verify-theory": {"n_systems": 3},
    "lqr-table": {},
    "rho-sweep": {"d_x": 4, "d_u": 2},
    "clqr": {"spectral_radius": 0.995, "constraint_bound": -0.05, "dual_kind": "mlp", "B": 40},
}


def load_config(cfg_path: Path) -> Dict:
    """Read a flat JSON object of ExperimentConfig keys; unknown keys are rejected."""
    with open(cfg_path, "r", encoding="utf-8") as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}") from e
        except UnicodeDecodeError as e:
            raise ConfigurationError(f"config is not UTF-8 text: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def build_config(command: str, file_values: Optional[Dict] = None,
                 overrides: Optional[Dict] = None) -> ExperimentConfig:
    """Defaults < per-command defaults < config file < explicit overrides."""
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command: {command!r}")
    values: Dict = dict(COMMAND_DEFAULTS[command])
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigurationError(str(e)) from e


def configure_logging(log_file: Optional[Path] = None, verbose: bool = True) -> logging.Logger:
    import logging.handlers as handlers

    logger = logging.getLogger("layered")
    logger.setLevel(logging.INFO)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    fmt = logging.Formatter("%(asctime)s [%(levelname)s] %(message)s")
    if verbose:
        sh = logging.StreamHandler()
        sh.setFormatter(fmt)
        logger.addHandler(sh)

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        fh = handlers.RotatingFileHandler(log_file, maxBytes=1_000_000, backupCount=3)
        fh.setFormatter(fmt)
        logger.addHandler(fh)

    return logger


@dataclass
class CommandResult:
    paths: List[Path]
    failures: int = 0


def _problem(config: ExperimentConfig, index: int, rho: Optional[float] = None) -> LayeredProblem:
    system = sample_system(config.seed + index, config.d_x, config.d_u, config.spectral_radius)
    constraints = None
    if config.constraint_bound is not None:
        constraints = ConstraintSpec.state_floor(config.T, config.d_x, config.constraint_bound,
                                                 free_initial=config.free_initial)
    return make_problem(system, config.T, q_weight=config.q_weight, r_weight=config.r_weight,
                        rho=config.rho if rho is None else rho, constraints=constraints)


def _layered_config(config: ExperimentConfig, seed: int, use_dual: bool) -> LayeredConfig:
    tracking = TrackingConfig(window=config.window, time_varying=config.time_varying,
                              noise_std=config.noise_std, explore_std=config.explore_std)
    return LayeredConfig(dual_kind=config.dual_kind, hidden=config.hidden, eta=config.eta, batch_size=config.B,
                         iterations=config.K, freeze_iterations=config.freeze, update_every=config.update_every,
                         exploration_episodes=config.episodes, use_dual=use_dual,
                         oracle_tracking=config.oracle_tracking, eval_count=config.eval_count, seed=seed,
                         tracking=tracking)


def _median(values: Sequence[float]) -> float:
    return float(np.median(values)) if len(values) else math.nan


# --- verify-theory -------------------------------------------------------------------------------

def _identity_row(index: int, seed: int) -> Dict:
    rng = np.random.default_rng(seed)
    d_x, d_u = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    T = int(rng.integers(2, 11))
    rho = float(rng.choice(RHO_CHOICES))
    problem = make_problem(sample_system(seed, d_x, d_u), T, q_weight=1.0, r_weight=0.01, rho=rho)
    oracle = build_oracle(problem)

    fixed_point = float(np.linalg.norm(oracle.H @ oracle.Theta_star + oracle.G, 2)
                        / max(np.linalg.norm(oracle.G, 2), 1e-300))

    nu = rng.standard_normal(problem.n_ref)
    xi = rng.standard_normal(d_x)
    r = plan_reference(oracle, nu, xi)
    tracked = optimal_tracking(oracle, r + nu, xi)
    executed = rollout(problem, xi, tracked.u, r)
    predicted = oracle.H @ nu + oracle.G @ xi
    rollout_residual = float(np.linalg.norm((r - problem.outputs(executed.x)) - predicted)
                             / max(1.0, np.linalg.norm(predicted)))

    kkt = kkt_brute_force(problem, xi)
    nu_star = oracle.Theta_star @ xi
    kkt_error = float(np.linalg.norm(kkt.nu - nu_star) / max(1.0, np.linalg.norm(nu_star)))

    p_min = float(np.linalg.eigvalsh(oracle.P).min())
    h_max = float(np.linalg.eigvalsh(oracle.H).max())
    passed = (p_min > 0 and h_max < 0 and fixed_point <= IDENTITY_TOL and rollout_residual <= ROLLOUT_TOL
              and kkt_error <= KKT_TOL)
    return {"instance": index, "seed": seed, "dx": d_x, "du": d_u, "T": T, "rho": rho, "p_min_eig": p_min,
            "h_max_eig": h_max, "fixed_point_residual": fixed_point, "rollout_residual": rollout_residual,
            "kkt_dual_error": kkt_error, "passed": passed}


def cmd_verify_theory(config: ExperimentConfig) -> CommandResult:
    out_dir = config.out_dir
    failures: List[Dict] = []

    identities = []
    for i in range(config.identity_instances):
        row = _identity_row(i, config.seed + i)
        identities.append(row)
        if not row["passed"]:
            failures.append(row)
    paths = [write_csv(out_dir / "theory_identities.csv", IDENTITY_HEADER,
                       [[row[k] for k in IDENTITY_HEADER] for row in identities])]

    wishart_rows = []
    for d_x, batch in WISHART_CASES:
        estimate = wishart_deviation(d_x, batch, config.wishart_trials, config.seed)
        bound = wishart_bound(d_x, batch)
        passed = estimate <= bound * (1.0 + 3.0 / math.sqrt(config.wishart_trials))
        wishart_rows.append([d_x, batch, config.wishart_trials, estimate, bound, passed])
        if not passed:
            failures.append({"check": "wishart", "dx": d_x, "B": batch, "estimate": estimate, "bound": bound})
    paths.append(write_csv(out_dir / "wishart.csv", WISHART_HEADER, wishart_rows))

    trace_rows = []
    for s in range(config.n_systems):
        problem = _problem(replace(config, constraint_bound=None), s)
        oracle = build_oracle(problem)
        batch = max(config.B, recommended_constants(oracle).batch_min)
        dual_config = DualLearnConfig(eta=config.eta, batch_size=batch, iterations=config.K, seed=config.seed + s)
        exact = run_exact_dual_learning(problem, oracle, dual_config)
        bound = exact.bound_trace
        for k in range(exact.theta_trace.size):
            trace_rows.append([s, 0.0, k, exact.theta_trace[k], exact.frobenius_trace[k], bound[k]])
        logger.info("System %d: exact dual error %.3g -> %.3g (gamma %.4g, B %d)", s, exact.theta_trace[0],
                    exact.theta_trace[-1], exact.gamma, batch)

        direction_rng = np.random.default_rng([config.seed, s])
        direction = PerturbationSpec.unit_direction(oracle, direction_rng)
        for eps in config.eps_levels:
            if eps == 0:
                continue
            perturbed = run_perturbed_dual_learning(problem, oracle, direction.scaled(eps), dual_config)
            for k in range(perturbed.theta_trace.size):
                trace_rows.append([s, eps, k, perturbed.theta_trace[k], perturbed.frobenius_trace[k],
                                   perturbed.bound_trace[k]])
    paths.append(write_csv(out_dir / "theta_trace.csv", THETA_TRACE_HEADER, trace_rows))

    if failures:
        paths.append(save_json({"failures": failures}, out_dir / "failing_instances.json"))
        logger.warning("%d theory checks failed; details in %s", len(failures), paths[-1])
    return CommandResult(paths=paths, failures=len(failures))


# --- learned pipeline tables ----------------------------------------------------------------------

FAILED_METRICS = PipelineMetrics(math.nan, math.nan, math.nan, math.nan, math.nan)


def _guarded_run(problem: LayeredProblem, config: LayeredConfig, oracle, evaluation) -> Optional[LayeredResult]:
    try:
        return run_layered_actor_critic(problem, config, oracle, evaluation)
    except LayeredError as e:
        logger.warning("Run with seed %d failed (%s); row flagged as diverged", config.seed, e)
        return None


def _metrics(result: Optional[LayeredResult]) -> PipelineMetrics:
    return FAILED_METRICS if result is None else result.metrics


def _run_pair(config: ExperimentConfig, problem: LayeredProblem, seed: int, with_nodual: bool = True):
    oracle = build_oracle(problem)
    evaluation = evaluation_set(problem, oracle, config.eval_count, seed)
    dual = _guarded_run(problem, _layered_config(config, seed, use_dual=True), oracle, evaluation)
    nodual = None
    if with_nodual:
        nodual = _guarded_run(problem, _layered_config(config, seed, use_dual=False), oracle, evaluation)
    return dual, nodual


def _metrics_path(config: ExperimentConfig, prefix: str, seed: int) -> Path:
    return config.out_dir / "metrics" / f"{prefix}_seed{seed}.csv"


def cmd_lqr_table(config: ExperimentConfig) -> CommandResult:
    rows, paths = [], []
    for s in range(config.n_systems):
        seed = config.seed + s
        dual, nodual = _run_pair(config, _problem(config, s), seed)
        if dual is not None:
            paths.append(write_metrics_csv(_metrics_path(config, "lqr", seed), dual))
        m, n = _metrics(dual), _metrics(nodual)
        diverged = m.diverged or n.diverged
        if diverged:
            logger.warning("System %d diverged (relative cost %.4g / %.4g without dual)", seed,
                           m.relative_cost, n.relative_cost)
        rows.append([config.d_x, config.d_u, seed, m.relative_cost, m.mean_deviation,
                     n.relative_cost, n.mean_deviation, diverged])
        logger.info("System %d: relative cost %.6g, deviation %.3g (no dual: %.6g, %.3g)", seed,
                    rows[-1][3], rows[-1][4], rows[-1][5], rows[-1][6])
    table = write_csv(config.out_dir / "lqr_table.csv", LQR_HEADER, rows)
    logger.info("Median relative cost %.6g, median deviation %.3g; wrote %s",
                _median([r[3] for r in rows]), _median([r[4] for r in rows]), table)
    return CommandResult(paths=[table] + paths)


def cmd_rho_sweep(config: ExperimentConfig) -> CommandResult:
    rows = []
    for rho in config.rho_values:
        for s in range(config.n_systems):
            seed = config.seed + s
            dual, _ = _run_pair(config, _problem(config, s, rho=rho), seed, with_nodual=False)
            m = _metrics(dual)
            rows.append([rho, config.d_x, config.d_u, seed, m.relative_cost, m.mean_deviation, m.diverged])
        logger.info("rho = %g: median relative cost %.6g", rho, _median([r[4] for r in rows if r[0] == rho]))
    table = write_csv(config.out_dir / "rho_sweep.csv", RHO_HEADER, rows)
    return CommandResult(paths=[table])


def cmd_clqr(config: ExperimentConfig) -> CommandResult:
    rows, paths = [], []
    for s in range(config.n_systems):
        seed = config.seed + s
        dual, nodual = _run_pair(config, _problem(config, s), seed)
        if dual is not None:
            paths.append(write_metrics_csv(_metrics_path(config, "clqr", seed), dual))
        m, n = _metrics(dual), _metrics(nodual)
        diverged = m.diverged or n.diverged
        rows.append([config.d_x, config.d_u, seed, m.relative_cost, m.mean_violation, m.mean_deviation,
                     n.relative_cost, n.mean_violation, n.mean_deviation, diverged])
        logger.info("System %d: relative cost %.6g, violation %.3g (no dual: %.6g, %.3g)", seed,
                    rows[-1][3], rows[-1][4], rows[-1][6], rows[-1][7])
    table = write_csv(config.out_dir / "clqr_table.csv", CLQR_HEADER, rows)
    return CommandResult(paths=[table] + paths)


RUNNERS = {
    "verify-theory": cmd_verify_theory,
    "lqr-table": cmd_lqr_table,
    "rho-sweep": cmd_rho_sweep,
    "clqr": cmd_clqr,
}


def run_command(command: str, config: ExperimentConfig) -> CommandResult:
    try:
        runner = RUNNERS[command]
    except KeyError as e:
        raise ConfigurationError(f"unknown command: {command!r}") from e
    logger.info("Running %s with %s", command, json.dumps(asdict(config), sort_keys=True))
    return runner(config)


