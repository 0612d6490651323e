"""
The layered learning loop: a dual map predicts nu_hat from xi, the planner solves against
the current tracking value, the tracking policy executes (and learns), and the dual map
moves along the reference/execution mismatch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .artifacts import write_csv
from .core import LayeredProblem, constraint_violation, executed_cost, tracking_deviation
from .dual import (DEFAULT_HIDDEN, LINEAR_STEP, MLP_STEP, DualMap, dual_gradient_step, make_dual_map,
                   recommended_constants)
from .errors import ConfigurationError, DimensionError, LayeredError
from .oracle import TrackingOracle, build_oracle, optimal_tracking, solve_direct
from .planner import ValueQuadratic, plan_constrained, plan_heuristic, solve_constrained_direct
from .tracking import (AugmentedEnv, QuadraticCritic, TrackingConfig, TrackingLearner, TrackingPolicy,
                       effective_perturbations, rollout_policy, sample_references, value_quadratic,
                       zero_policy_value)

logger = logging.getLogger(__name__)

METRICS_HEADER = ["episode", "eval_cost", "eval_deviation", "eps_ur", "eps_uxi", "eps_P"]
DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class LayeredConfig:
    dual_kind: str = "linear"
    hidden: int = DEFAULT_HIDDEN
    eta: Union[float, str] = "auto"
    batch_size: int = 5
    iterations: int = 200
    freeze_iterations: int = 100
    update_every: int = 10
    exploration_episodes: int = 20
    use_dual: bool = True
    oracle_tracking: bool = False
    eval_count: int = 50
    eval_every: int = 0
    seed: int = 0
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def __post_init__(self):
        if self.dual_kind not in ("linear", "mlp"):
            raise ConfigurationError(f"dual map must be 'linear' or 'mlp', got {self.dual_kind!r}")
        if isinstance(self.eta, str):
            if self.eta != "auto":
                raise ConfigurationError(f"eta must be a positive number or 'auto', got {self.eta!r}")
        elif not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        for name in ("hidden", "batch_size", "iterations", "update_every", "eval_count"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("freeze_iterations", "exploration_episodes", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class PipelineMetrics:
    relative_cost: float
    mean_deviation: float
    mean_violation: float
    achieved_cost: float
    optimal_cost: float

    @property
    def diverged(self) -> bool:
        return not math.isfinite(self.relative_cost) or self.relative_cost > DIVERGENCE_FACTOR


@dataclass(frozen=True)
class MetricsRow:
    episode: int
    eval_cost: float
    eval_deviation: float
    eps_ur: float
    eps_uxi: float
    eps_P: float


@dataclass(frozen=True, eq=False)
class LayeredResult:
    policy: Optional[TrackingPolicy]
    critic: Optional[QuadraticCritic]
    dual_map: DualMap
    metrics: PipelineMetrics
    history: List[MetricsRow]
    eta: float
    rank_deficient: bool


@dataclass(frozen=True, eq=False)
class EvaluationSet:
    """Held-out initial states with their optimal costs, shared across pipeline variants."""

    xi: np.ndarray
    optimal_costs: np.ndarray


def _streams(seed: int):
    """Initial-state, exploration, dual-initialization and evaluation generators."""
    return (np.random.default_rng(seed), np.random.default_rng([seed, 1]),
            np.random.default_rng([seed, 2]), np.random.default_rng([seed, 3]))


def evaluation_set(problem: LayeredProblem, oracle: TrackingOracle, count: int, seed: int) -> EvaluationSet:
    xi = problem.sample_initial_states(_streams(seed)[3], count)
    if problem.is_constrained:
        optimal = np.array([solve_constrained_direct(problem, oracle, xi[:, i]).cost for i in range(count)])
    else:
        optimal = np.asarray(solve_direct(oracle, xi).cost)
    return EvaluationSet(xi=xi, optimal_costs=optimal)


def resolve_pipeline_step(config: LayeredConfig, problem: LayeredProblem, oracle: TrackingOracle) -> float:
    if config.eta != "auto":
        return float(config.eta)
    if config.dual_kind == "mlp" or problem.is_constrained:
        return MLP_STEP
    if config.oracle_tracking:
        return recommended_constants(oracle).eta_star
    return LINEAR_STEP


class _Stack:
    """Current tracking layer: either the exact oracle or the learner's policy and value."""

    def __init__(self, problem: LayeredProblem, oracle: TrackingOracle, config: LayeredConfig):
        self.problem = problem
        self.oracle = oracle
        self.config = config
        if config.oracle_tracking:
            self.env = None
            self.learner = None
            self.value = ValueQuadratic.from_oracle(oracle)
        else:
            self.env = AugmentedEnv(problem, config.tracking.window)
            if self.env.window < problem.T:
                raise ConfigurationError("the layered loop needs a lookahead window covering the horizon")
            self.learner = TrackingLearner(self.env, config.tracking, rng=np.random.default_rng([config.seed, 4]))
            self.value = zero_policy_value(oracle)

    def plan(self, nu_hat: np.ndarray, X: np.ndarray) -> np.ndarray:
        if self.config.use_dual:
            return plan_constrained(self.problem, self.value, nu_hat, X)
        return plan_heuristic(self.problem, self.value, X)

    def execute(self, r_tilde: np.ndarray, X: np.ndarray, rng: Optional[np.random.Generator] = None,
                learn: bool = False, noise_std: Optional[float] = None):
        """Executed (x, u) for the references; records the episode when learning."""
        if self.learner is None:
            tracked = optimal_tracking(self.oracle, r_tilde, X)
            return tracked.x, tracked.u
        noise = 0.0
        if learn:
            noise = self.config.tracking.noise_std if noise_std is None else noise_std
        episode = rollout_policy(self.env, self.learner.policy, X, r_tilde, rng=rng, noise_std=noise)
        if learn:
            self.learner.record(episode)
        return episode.x, episode.u

    def explore(self, rng: np.random.Generator) -> None:
        count = self.config.exploration_episodes
        if self.learner is None or count == 0:
            return
        X = self.problem.sample_initial_states(rng, count)
        R = sample_references(self.problem, rng, count, self.config.tracking.reference_std)
        self.execute(R, X, rng=rng, learn=True, noise_std=self.config.tracking.explore_std)

    def refit(self) -> None:
        if self.learner is None or not self.learner.update():
            return
        try:
            self.value = value_quadratic(self.env, self.learner.policy, self.learner.critic)
        except LayeredError as e:
            logger.warning("Keeping the previous tracking value: %s", e)


def _evaluate(stack: _Stack, dual_map: DualMap, evaluation: EvaluationSet) -> PipelineMetrics:
    problem = stack.problem
    X = evaluation.xi
    nu_hat = dual_map.predict(X) if stack.config.use_dual else np.zeros((problem.n_ref, X.shape[1]))
    r = stack.plan(nu_hat, X)
    r_tilde = r + nu_hat if stack.config.use_dual else r
    x, u = stack.execute(r_tilde, X)
    achieved = float(np.sum(executed_cost(problem, x, u)))
    optimal = float(np.sum(evaluation.optimal_costs))
    return PipelineMetrics(
        relative_cost=achieved / optimal if optimal > 0 else math.inf,
        mean_deviation=float(np.mean(tracking_deviation(problem, r, x))),
        mean_violation=float(np.mean(constraint_violation(problem, x))),
        achieved_cost=achieved,
        optimal_cost=optimal,
    )


def _history_row(stack: _Stack, dual_map: DualMap, evaluation: EvaluationSet, episode: int) -> MetricsRow:
    metrics = _evaluate(stack, dual_map, evaluation)
    if stack.learner is None:
        eps = (0.0, 0.0, 0.0)
    elif stack.learner.critic is None:
        eps = (math.nan, math.nan, math.nan)
    else:
        effective = effective_perturbations(stack.oracle, stack.env, stack.learner.policy, stack.learner.critic)
        eps = (effective.spec.eps_ur, effective.spec.eps_uxi, effective.eps_P)
    return MetricsRow(episode, metrics.relative_cost, metrics.mean_deviation, *eps)


def run_layered_actor_critic(problem: LayeredProblem, config: LayeredConfig,
                             oracle: Optional[TrackingOracle] = None,
                             evaluation: Optional[EvaluationSet] = None,
                             dual_init: Optional[DualMap] = None) -> LayeredResult:
    oracle = build_oracle(problem) if oracle is None else oracle
    if evaluation is None:
        evaluation = evaluation_set(problem, oracle, config.eval_count, config.seed)
    eta = resolve_pipeline_step(config, problem, oracle)
    xi_rng, explore_rng, init_rng, _ = _streams(config.seed)

    dual_map = dual_init if dual_init is not None else make_dual_map(
        config.dual_kind, problem.d_x, problem.n_ref, init_rng, config.hidden)
    if dual_map.d_x != problem.d_x or dual_map.n_out != problem.n_ref:
        raise DimensionError("dual map dimensions do not match the problem")
    stack = _Stack(problem, oracle, config)

    history: List[MetricsRow] = []
    total = config.iterations + config.freeze_iterations
    for k in range(total):
        learning = k < config.iterations and stack.learner is not None
        X = problem.sample_initial_states(xi_rng, config.batch_size)
        nu_hat = dual_map.predict(X) if config.use_dual else np.zeros((problem.n_ref, config.batch_size))
        r = stack.plan(nu_hat, X)
        x, _ = stack.execute(r + nu_hat, X, rng=explore_rng, learn=learning)
        if learning:
            stack.explore(explore_rng)
        if config.use_dual:
            dual_map = dual_gradient_step(dual_map, X, r - problem.outputs(x), eta)
        if learning and ((k + 1) % config.update_every == 0 or k + 1 == config.iterations):
            stack.refit()
        if config.eval_every and (k + 1) % config.eval_every == 0:
            history.append(_history_row(stack, dual_map, evaluation, k + 1))
            logger.debug("iteration %d: relative cost %.6g, deviation %.3g", k + 1,
                         history[-1].eval_cost, history[-1].eval_deviation)

    metrics = _evaluate(stack, dual_map, evaluation)
    if not history or history[-1].episode != total:
        history.append(_history_row(stack, dual_map, evaluation, total))
    if metrics.diverged:
        logger.warning("Layered run diverged: relative cost %.4g", metrics.relative_cost)
    learner = stack.learner
    return LayeredResult(
        policy=learner.policy if learner is not None else None,
        critic=learner.critic if learner is not None else None,
        dual_map=dual_map,
        metrics=metrics,
        history=history,
        eta=eta,
        rank_deficient=learner.rank_deficient if learner is not None else False,
    )


def write_metrics_csv(out_path: Path, result: LayeredResult) -> Path:
    rows = [(row.episode, row.eval_cost, row.eval_deviation, row.eps_ur, row.eps_uxi, row.eps_P)
            for row in result.history]
    return write_csv(out_path, METRICS_HEADER, rows)
