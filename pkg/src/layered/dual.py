"""
Parametric dual maps xi -> nu_hat and the dual-ascent style parameter update.

The update moves v_theta(xi_i) along the mismatch r_i - z_i without differentiating
through r_i or z_i:  theta <- theta + eta (1/B) sum_i J_theta(xi_i)^T (r_i - z_i).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .artifacts import write_csv
from .core import LayeredProblem, as_batch, unbatch
from .errors import ConfigurationError, DegenerateProblemError, DimensionError, InvalidArgumentError
from .oracle import TrackingOracle, optimal_tracking, plan_reference

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = 128
LINEAR_STEP = 0.1
MLP_STEP = 3e-4
TRACE_HEADER = ["iter", "theta_err_spectral", "theta_err_frobenius", "gamma_bound"]


class DualMap:
    """Interface shared by the linear and MLP dual maps; instances are immutable."""

    d_x: int
    n_out: int

    def predict(self, xi) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> np.ndarray:
        raise NotImplementedError

    def with_parameters(self, flat: np.ndarray) -> "DualMap":
        raise NotImplementedError

    def parameter_gradient(self, xis: np.ndarray, residuals: np.ndarray) -> np.ndarray:
        """Gradient of sum_i residual_i^T v(xi_i) w.r.t. the flat parameters."""
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class LinearDualMap(DualMap):
    Theta: np.ndarray

    @classmethod
    def zeros(cls, d_x: int, n_out: int) -> "LinearDualMap":
        return cls(np.zeros((n_out, d_x)))

    @property
    def d_x(self) -> int:
        return self.Theta.shape[1]

    @property
    def n_out(self) -> int:
        return self.Theta.shape[0]

    def predict(self, xi) -> np.ndarray:
        X, single = as_batch(xi, self.d_x, "initial state")
        return unbatch(self.Theta @ X, single)

    def parameters(self) -> np.ndarray:
        return self.Theta.ravel().copy()

    def with_parameters(self, flat: np.ndarray) -> "LinearDualMap":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.size != self.Theta.size:
            raise DimensionError(f"expected {self.Theta.size} parameters, got {flat.size}")
        return LinearDualMap(flat.reshape(self.Theta.shape))

    def parameter_gradient(self, xis: np.ndarray, residuals: np.ndarray) -> np.ndarray:
        return (residuals @ xis.T).ravel()


@dataclass(frozen=True, eq=False)
class MlpDualMap(DualMap):
    """One hidden ReLU layer: v(xi) = W2 relu(W1 xi + b1) + b2."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def initialize(cls, rng: np.random.Generator, d_x: int, n_out: int,
                   hidden: int = DEFAULT_HIDDEN) -> "MlpDualMap":
        W1 = rng.standard_normal((hidden, d_x)) / math.sqrt(d_x)
        W2 = rng.standard_normal((n_out, hidden)) / math.sqrt(hidden)
        return cls(W1=W1, b1=np.zeros(hidden), W2=W2, b2=np.zeros(n_out))

    @property
    def d_x(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def _forward(self, X: np.ndarray):
        pre = self.W1 @ X + self.b1[:, None]
        act = np.maximum(pre, 0.0)
        return pre, act, self.W2 @ act + self.b2[:, None]

    def predict(self, xi) -> np.ndarray:
        X, single = as_batch(xi, self.d_x, "initial state")
        return unbatch(self._forward(X)[2], single)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_parameters(self, flat: np.ndarray) -> "MlpDualMap":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        shapes = [self.W1.shape, self.b1.shape, self.W2.shape, self.b2.shape]
        sizes = [int(np.prod(shape)) for shape in shapes]
        if flat.size != sum(sizes):
            raise DimensionError(f"expected {sum(sizes)} parameters, got {flat.size}")
        parts, start = [], 0
        for shape, size in zip(shapes, sizes):
            parts.append(flat[start:start + size].reshape(shape))
            start += size
        return MlpDualMap(*parts)

    def parameter_gradient(self, xis: np.ndarray, residuals: np.ndarray) -> np.ndarray:
        pre, act, _ = self._forward(xis)
        d_W2 = residuals @ act.T
        d_b2 = residuals.sum(axis=1)
        delta = (self.W2.T @ residuals) * (pre > 0)
        d_W1 = delta @ xis.T
        d_b1 = delta.sum(axis=1)
        return np.concatenate([d_W1.ravel(), d_b1, d_W2.ravel(), d_b2])


def make_dual_map(kind: str, d_x: int, n_out: int, rng: Optional[np.random.Generator] = None,
                  hidden: int = DEFAULT_HIDDEN) -> DualMap:
    if kind == "linear":
        return LinearDualMap.zeros(d_x, n_out)
    if kind == "mlp":
        return MlpDualMap.initialize(rng if rng is not None else np.random.default_rng(0), d_x, n_out, hidden)
    raise ConfigurationError(f"unknown dual map kind: {kind!r} (expected 'linear' or 'mlp')")


def predict_dual(dual_map: DualMap, xi) -> np.ndarray:
    return dual_map.predict(xi)


def dual_gradient_step(dual_map: DualMap, xis, residuals, eta: float) -> DualMap:
    """One ascent step; xis (d_x, B) and residuals (n_out, B) hold samples as columns."""
    if np.size(xis) == 0 or np.size(residuals) == 0:
        raise InvalidArgumentError("dual update needs a non-empty batch")
    X, _ = as_batch(xis, dual_map.d_x, "initial states")
    res, _ = as_batch(residuals, dual_map.n_out, "residuals")
    if X.shape[1] != res.shape[1]:
        raise DimensionError(f"batch has {X.shape[1]} initial states but {res.shape[1]} residuals")
    batch = X.shape[1]
    if isinstance(dual_map, LinearDualMap):
        return LinearDualMap(dual_map.Theta + (eta / batch) * (res @ X.T))
    step = (eta / batch) * dual_map.parameter_gradient(X, res)
    return dual_map.with_parameters(dual_map.parameters() + step)


@dataclass(frozen=True, eq=False)
class DualLearnConfig:
    eta: Union[float, str] = "auto"
    batch_size: int = 5
    iterations: int = 200
    seed: int = 0
    theta_init: Optional[np.ndarray] = None

    def __post_init__(self):
        if isinstance(self.eta, str):
            if self.eta != "auto":
                raise ConfigurationError(f"eta must be a positive number or 'auto', got {self.eta!r}")
        elif not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigurationError(f"iteration count must be >= 1, got {self.iterations}")


@dataclass(frozen=True, eq=False)
class StepConstants:
    H: np.ndarray
    d_x: int
    sigma_max: float
    sigma_min: float
    eta_star: float
    batch_min: int

    def contraction(self, eta: float) -> float:
        """||I + eta H||_2."""
        return float(np.linalg.norm(np.eye(self.H.shape[0]) + eta * self.H, 2))

    def gamma(self, eta: float, batch: int) -> float:
        return self.contraction(eta) + eta * self.sigma_max * wishart_bound(self.d_x, batch)


def recommended_constants(oracle: TrackingOracle) -> StepConstants:
    H = oracle.H
    sigma = np.linalg.svd(H, compute_uv=False)
    sigma_max, sigma_min = float(sigma.max()), float(sigma.min())
    if sigma_min < 1e-12:
        raise DegenerateProblemError(f"H is numerically singular (sigma_min = {sigma_min:.3g})")
    d_x = oracle.problem.d_x
    # smallest integer B with wishart_bound(d_x, B) < sigma_min / sigma_max
    batch_min = int(math.floor(d_x * (d_x + 1) * sigma_max ** 2 / sigma_min ** 2)) + 1
    return StepConstants(H=H, d_x=d_x, sigma_max=sigma_max, sigma_min=sigma_min,
                         eta_star=2.0 / (sigma_max + sigma_min), batch_min=batch_min)


@dataclass(frozen=True, eq=False)
class DualLearningResult:
    theta_trace: np.ndarray
    frobenius_trace: np.ndarray
    eta: float
    batch_size: int
    gamma: float
    final_map: LinearDualMap
    contraction_warning: bool

    @property
    def bound_trace(self) -> np.ndarray:
        k = np.arange(self.theta_trace.size)
        return self.gamma ** k * self.theta_trace[0]


def resolve_step(eta: Union[float, str], constants: StepConstants) -> float:
    return constants.eta_star if eta == "auto" else float(eta)


PlanFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
TrackFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def run_dual_iterations(problem: LayeredProblem, theta_star: np.ndarray, config: DualLearnConfig,
                        eta: float, plan: PlanFn, track: TrackFn):
    """Shared loop: sample, predict, plan, track, update. Returns (final map, spectral, frobenius)."""
    rng = np.random.default_rng(config.seed)
    if config.theta_init is not None:
        dual_map = LinearDualMap(np.array(config.theta_init, dtype=float))
        if dual_map.Theta.shape != theta_star.shape:
            raise DimensionError(f"theta_init must have shape {theta_star.shape}, got {dual_map.Theta.shape}")
    else:
        dual_map = LinearDualMap.zeros(problem.d_x, problem.n_ref)

    spectral = [np.linalg.norm(dual_map.Theta - theta_star, 2)]
    frobenius = [np.linalg.norm(dual_map.Theta - theta_star)]
    for k in range(config.iterations):
        X = problem.sample_initial_states(rng, config.batch_size)
        nu_hat = dual_map.predict(X)
        r = plan(nu_hat, X)
        x = track(r + nu_hat, X)
        dual_map = dual_gradient_step(dual_map, X, r - problem.outputs(x), eta)
        spectral.append(np.linalg.norm(dual_map.Theta - theta_star, 2))
        frobenius.append(np.linalg.norm(dual_map.Theta - theta_star))
        logger.debug("dual iteration %d: ||Theta - Theta*||_2 = %.6g", k + 1, spectral[-1])
    return dual_map, np.array(spectral), np.array(frobenius)


def run_exact_dual_learning(problem: LayeredProblem, oracle: TrackingOracle,
                            config: DualLearnConfig) -> DualLearningResult:
    constants = recommended_constants(oracle)
    eta = resolve_step(config.eta, constants)
    gamma = constants.gamma(eta, config.batch_size)
    warn = gamma >= 1.0
    if warn:
        logger.warning("Contraction bound gamma(eta=%.4g, B=%d) = %.4g >= 1; convergence is not guaranteed",
                       eta, config.batch_size, gamma)

    final_map, spectral, frobenius = run_dual_iterations(
        problem, oracle.Theta_star, config, eta,
        plan=lambda nu, X: plan_reference(oracle, nu, X),
        track=lambda r_tilde, X: optimal_tracking(oracle, r_tilde, X).x,
    )
    return DualLearningResult(theta_trace=spectral, frobenius_trace=frobenius, eta=eta,
                              batch_size=config.batch_size, gamma=gamma, final_map=final_map,
                              contraction_warning=warn)


def write_trace_csv(out_path: Path, result: DualLearningResult) -> Path:
    bound = result.bound_trace
    rows = [(k, result.theta_trace[k], result.frobenius_trace[k], bound[k])
            for k in range(result.theta_trace.size)]
    return write_csv(out_path, TRACE_HEADER, rows)


def wishart_bound(d_x: int, batch: int) -> float:
    """sqrt(E||(1/B) sum xi xi^T - I||_F^2) for B standard-normal xi in R^{d_x}."""
    return math.sqrt(d_x * (d_x + 1) / batch)


def wishart_deviation(d_x: int, batch: int, trials: int, seed: int) -> float:
    """Monte Carlo E||(1/B) sum xi xi^T - I||_F for standard-normal xi."""
    if trials < 1:
        raise InvalidArgumentError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    chunk = max(1, (1 << 20) // (batch * d_x))
    total, done = 0.0, 0
    while done < trials:
        count = min(chunk, trials - done)
        xi = rng.standard_normal((count, batch, d_x))
        second = np.einsum("tbi,tbj->tij", xi, xi) / batch
        total += float(np.linalg.norm(second - np.eye(d_x), axis=(1, 2)).sum())
        done += count
    return total / trials
