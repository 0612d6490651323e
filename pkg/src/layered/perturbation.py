"""
Structured suboptimal tracking: a perturbed value function (Delta_P) and a perturbed
policy (Delta_ur, Delta_uxi), the resulting perturbed difference map, its error bounds,
and dual learning on top of the perturbed tracker.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .artifacts import write_csv
from .core import LayeredProblem, as_batch, quad_form, unbatch
from .dual import (DualLearnConfig, LinearDualMap, recommended_constants, resolve_step,
                   run_dual_iterations, wishart_bound)
from .errors import ConfigurationError, DimensionError, PerturbationTooLargeError
from .oracle import TrackingOracle, optimal_tracking, plan_reference

logger = logging.getLogger(__name__)

PLATEAU_FRACTION = 0.2
PERTURBED_TRACE_HEADER = ["iter", "theta_err", "error_bound", "plateau_flag"]


def _spectral(M: np.ndarray) -> float:
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


def _unit_direction(rng: np.random.Generator, shape, symmetric: bool = False) -> np.ndarray:
    M = rng.standard_normal(shape)
    if symmetric:
        M = 0.5 * (M + M.T)
    norm = _spectral(M)
    return M / norm if norm > 0 else M


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    Delta_P: np.ndarray
    Delta_ur: np.ndarray
    Delta_uxi: np.ndarray

    def __post_init__(self):
        Delta_P = np.array(self.Delta_P, dtype=float)
        if Delta_P.ndim != 2 or Delta_P.shape[0] != Delta_P.shape[1]:
            raise DimensionError(f"Delta_P must be square, got shape {Delta_P.shape}")
        if np.max(np.abs(Delta_P - Delta_P.T), initial=0.0) > 1e-10 * max(1.0, np.abs(Delta_P).max(initial=0.0)):
            raise ConfigurationError("Delta_P must be symmetric")
        Delta_ur = np.array(self.Delta_ur, dtype=float)
        Delta_uxi = np.array(self.Delta_uxi, dtype=float)
        if Delta_ur.ndim != 2 or Delta_uxi.ndim != 2 or Delta_ur.shape[0] != Delta_uxi.shape[0] \
                or Delta_ur.shape[1] != Delta_P.shape[0]:
            raise DimensionError("Delta_ur must be n_input x n_ref and Delta_uxi n_input x d_x")
        object.__setattr__(self, "Delta_P", 0.5 * (Delta_P + Delta_P.T))
        object.__setattr__(self, "Delta_ur", Delta_ur)
        object.__setattr__(self, "Delta_uxi", Delta_uxi)

    @classmethod
    def zero(cls, oracle: TrackingOracle) -> "PerturbationSpec":
        p = oracle.problem
        return cls(np.zeros((p.n_ref, p.n_ref)), np.zeros((p.n_input, p.n_ref)), np.zeros((p.n_input, p.d_x)))

    @classmethod
    def for_oracle(cls, oracle: TrackingOracle, Delta_P=None, Delta_ur=None, Delta_uxi=None) -> "PerturbationSpec":
        """Fill missing blocks with zeros, check shapes against the problem and Q + P + Delta_P > 0."""
        p = oracle.problem
        zero = cls.zero(oracle)
        spec = cls(zero.Delta_P if Delta_P is None else Delta_P,
                   zero.Delta_ur if Delta_ur is None else Delta_ur,
                   zero.Delta_uxi if Delta_uxi is None else Delta_uxi)
        if spec.Delta_P.shape != (p.n_ref, p.n_ref) or spec.Delta_ur.shape != (p.n_input, p.n_ref) \
                or spec.Delta_uxi.shape != (p.n_input, p.d_x):
            raise DimensionError("perturbation blocks do not match the problem dimensions")
        _check_value_pd(oracle, spec)
        return spec

    @classmethod
    def random(cls, oracle: TrackingOracle, rng: np.random.Generator, eps_P: float = 0.0,
               eps_ur: float = 0.0, eps_uxi: float = 0.0) -> "PerturbationSpec":
        direction = cls.unit_direction(oracle, rng)
        return cls.for_oracle(oracle, Delta_P=eps_P * direction.Delta_P, Delta_ur=eps_ur * direction.Delta_ur,
                              Delta_uxi=eps_uxi * direction.Delta_uxi)

    @classmethod
    def unit_direction(cls, oracle: TrackingOracle, rng: np.random.Generator) -> "PerturbationSpec":
        """Gaussian blocks scaled to unit spectral norm; not checked against the oracle."""
        p = oracle.problem
        return cls(_unit_direction(rng, (p.n_ref, p.n_ref), symmetric=True),
                   _unit_direction(rng, (p.n_input, p.n_ref)),
                   _unit_direction(rng, (p.n_input, p.d_x)))

    def scaled(self, factor: float) -> "PerturbationSpec":
        return PerturbationSpec(factor * self.Delta_P, factor * self.Delta_ur, factor * self.Delta_uxi)

    @property
    def eps_P(self) -> float:
        return _spectral(self.Delta_P)

    @property
    def eps_ur(self) -> float:
        return _spectral(self.Delta_ur)

    @property
    def eps_uxi(self) -> float:
        return _spectral(self.Delta_uxi)

    @property
    def is_zero(self) -> bool:
        return not (self.Delta_P.any() or self.Delta_ur.any() or self.Delta_uxi.any())


@dataclass(frozen=True, eq=False)
class PerturbedTracking:
    u_hat: np.ndarray
    x_hat: np.ndarray
    p_hat: object


@dataclass(frozen=True)
class PerturbationBounds:
    e_H: float
    e_G: float
    radius_e: float
    admissible: bool
    gamma_perturbed: float
    delta_H_norm: float
    threshold: float
    eta: float
    plateau_radius: float


@dataclass(frozen=True, eq=False)
class PerturbedDifferenceMap:
    H: np.ndarray
    G: np.ndarray
    Delta_H: np.ndarray
    Delta_G: np.ndarray


def _check_value_pd(oracle: TrackingOracle, spec: PerturbationSpec) -> None:
    D = oracle.problem.stacked_Q + oracle.P + spec.Delta_P
    if np.linalg.eigvalsh(0.5 * (D + D.T)).min() <= 0:
        raise PerturbationTooLargeError("Q + P + Delta_P is not positive definite")


def _perturbed_plan_gain(oracle: TrackingOracle, spec: PerturbationSpec) -> np.ndarray:
    """(𝒬 + P + Delta_P)^{-1} (P + Delta_P)."""
    _check_value_pd(oracle, spec)
    D = oracle.problem.stacked_Q + oracle.P + spec.Delta_P
    return np.linalg.solve(0.5 * (D + D.T), oracle.P + spec.Delta_P)


def perturbed_tracking(oracle: TrackingOracle, spec: PerturbationSpec, r_tilde, xi) -> PerturbedTracking:
    problem = oracle.problem
    R_t, single_r = as_batch(r_tilde, problem.n_ref, "reference")
    X, single_x = as_batch(xi, problem.d_x, "initial state")
    single = single_r and single_x

    exact = optimal_tracking(oracle, R_t, X)
    residual = R_t - oracle.Fz @ X
    u_hat = exact.u + spec.Delta_ur @ R_t + spec.Delta_uxi @ X
    x_hat = oracle.E @ u_hat + oracle.F @ X
    p_hat = exact.value + quad_form(spec.Delta_P, residual)
    if single:
        p_hat = float(p_hat[0])
    return PerturbedTracking(u_hat=unbatch(u_hat, single), x_hat=unbatch(x_hat, single), p_hat=p_hat)


def perturbed_plan_reference(oracle: TrackingOracle, spec: PerturbationSpec, nu, xi) -> np.ndarray:
    """Planning against the perturbed value: r = (𝒬 + P + Delta_P)^{-1}(P + Delta_P)(F_z xi - nu)."""
    problem = oracle.problem
    N, single_n = as_batch(nu, problem.n_ref, "dual")
    X, single_x = as_batch(xi, problem.d_x, "initial state")
    r = _perturbed_plan_gain(oracle, spec) @ (oracle.Fz @ X - N)
    return unbatch(r, single_n and single_x)


def perturbed_difference_map(oracle: TrackingOracle, spec: PerturbationSpec) -> PerturbedDifferenceMap:
    """H', G' with r - z = H' nu + G' xi for perturbed planning and tracking."""
    n = oracle.problem.n_ref
    plan_gain = _perturbed_plan_gain(oracle, spec)
    S = oracle.S
    drift = oracle.Ez @ spec.Delta_ur
    M = np.eye(n) - S - drift
    H_p = -M @ plan_gain - S - drift
    G_p = M @ plan_gain @ oracle.Fz - (np.eye(n) - S) @ oracle.Fz - oracle.Ez @ spec.Delta_uxi
    return PerturbedDifferenceMap(H=H_p, G=G_p, Delta_H=H_p - oracle.H, Delta_G=G_p - oracle.G)


def perturbation_bounds(oracle: TrackingOracle, spec: PerturbationSpec, batch: int, batch0: int,
                        eta: Optional[float] = None) -> PerturbationBounds:
    constants = recommended_constants(oracle)
    eta = constants.eta_star if eta is None else float(eta)
    d_x = oracle.problem.d_x
    rho = oracle.rho
    P_norm = _spectral(oracle.P)
    Ez_norm, Fz_norm = _spectral(oracle.Ez), _spectral(oracle.Fz)
    lam = float(np.linalg.eigvalsh(oracle.problem.stacked_Q + oracle.P).min())

    spread = constants.contraction(constants.eta_star)
    threshold = spread / (1.0 + wishart_bound(d_x, batch0))
    hypothesis = spec.eps_P < lam / 2.0

    try:
        delta_H_norm = _spectral(perturbed_difference_map(oracle, spec).Delta_H)
    except PerturbationTooLargeError:
        delta_H_norm = math.inf

    if hypothesis:
        eps = max(spec.eps_P, 0.5 * rho * Ez_norm * spec.eps_ur)
        e_H = (2.0 / rho) * (2 * eps * P_norm / lam + eps ** 2 / lam + 2 * eps * (P_norm + eps) ** 2 / lam ** 2) \
            + Ez_norm * spec.eps_ur
        e_G = Fz_norm * e_H + Ez_norm * spec.eps_uxi
        theta_norm = _spectral(oracle.Theta_star)
        radius_e = (1.0 + wishart_bound(d_x, batch)) * (e_G + e_H * theta_norm)
    else:
        e_H = e_G = radius_e = math.inf
    admissible = hypothesis and delta_H_norm < threshold

    sampling = wishart_bound(d_x, batch)
    gamma_p = constants.gamma(eta, batch) + eta * (1.0 + sampling) * delta_H_norm
    if gamma_p < 1.0 and math.isfinite(radius_e):
        plateau_radius = eta * radius_e / (1.0 - gamma_p)
    else:
        plateau_radius = math.inf
    return PerturbationBounds(e_H=e_H, e_G=e_G, radius_e=radius_e, admissible=admissible,
                              gamma_perturbed=gamma_p, delta_H_norm=delta_H_norm, threshold=threshold,
                              eta=eta, plateau_radius=plateau_radius)


@dataclass(frozen=True, eq=False)
class PerturbedLearningResult:
    theta_trace: np.ndarray
    frobenius_trace: np.ndarray
    bound_trace: np.ndarray
    plateau: float
    plateau_start: int
    bounds: PerturbationBounds
    final_map: LinearDualMap
    inadmissible_warning: bool


def plateau_start(n_points: int) -> int:
    tail = max(1, int(math.ceil(PLATEAU_FRACTION * (n_points - 1))))
    return n_points - tail


def run_perturbed_dual_learning(problem: LayeredProblem, oracle: TrackingOracle, spec: PerturbationSpec,
                                config: DualLearnConfig, batch0: Optional[int] = None) -> PerturbedLearningResult:
    constants = recommended_constants(oracle)
    eta = resolve_step(config.eta, constants)
    bounds = perturbation_bounds(oracle, spec, config.batch_size,
                                 batch0 if batch0 is not None else config.batch_size, eta=eta)
    if not bounds.admissible:
        logger.warning("Perturbation is not admissible (||Delta_H|| = %.4g, threshold %.4g); "
                       "the bound is not guaranteed",
                       bounds.delta_H_norm, bounds.threshold)

    if spec.is_zero:
        plan = lambda nu, X: plan_reference(oracle, nu, X)  # noqa: E731
        track = lambda r_tilde, X: optimal_tracking(oracle, r_tilde, X).x  # noqa: E731
    else:
        plan_gain = _perturbed_plan_gain(oracle, spec)
        plan = lambda nu, X: plan_gain @ (oracle.Fz @ X - nu)  # noqa: E731
        track = lambda r_tilde, X: perturbed_tracking(oracle, spec, r_tilde, X).x_hat  # noqa: E731

    final_map, spectral, frobenius = run_dual_iterations(problem, oracle.Theta_star, config, eta, plan, track)

    gamma_p = bounds.gamma_perturbed
    k = np.arange(spectral.size)
    geometric = gamma_p ** k
    if gamma_p < 1.0 and math.isfinite(bounds.radius_e):
        bound_trace = geometric * spectral[0] + (1.0 - geometric) / (1.0 - gamma_p) * eta * bounds.radius_e
    else:
        bound_trace = np.full(spectral.size, np.inf)
        bound_trace[0] = spectral[0]
    start = plateau_start(spectral.size)
    return PerturbedLearningResult(theta_trace=spectral, frobenius_trace=frobenius, bound_trace=bound_trace,
                                   plateau=float(spectral[start:].mean()), plateau_start=start, bounds=bounds,
                                   final_map=final_map, inadmissible_warning=not bounds.admissible)


def write_perturbed_trace_csv(out_path: Path, result: PerturbedLearningResult) -> Path:
    rows = [(k, result.theta_trace[k], result.bound_trace[k], k >= result.plateau_start)
            for k in range(result.theta_trace.size)]
    return write_csv(out_path, PERTURBED_TRACE_HEADER, rows)
