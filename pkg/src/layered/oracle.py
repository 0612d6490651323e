"""
Closed-form solutions of the unconstrained LQ layered problem.

With x = E u + F xi and z = 𝒞x, tracking r~ costs p*(r~; xi) = (F_z xi - r~)^T P (F_z xi - r~),
planning is r = (𝒬 + P)^{-1} P (F_z xi - nu), and the plan/track composition satisfies
r - z = H nu + G xi with G = -(H + I) F_z.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy import linalg

from .core import LayeredProblem, as_batch, build_stacked_maps, quad_form, unbatch
from .errors import ConfigurationError, DegenerateProblemError, DimensionError, IllConditionedError

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def spd_solve(M: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    """Cholesky solve with a condition-number guard."""
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedError(f"{what} is ill-conditioned (condition number {cond:.3g})")
    try:
        factor = linalg.cho_factor(M)
    except linalg.LinAlgError as e:
        raise IllConditionedError(f"{what} is not positive definite") from e
    return linalg.cho_solve(factor, rhs)


@dataclass(frozen=True, eq=False)
class TrackingOracle:
    problem: LayeredProblem
    E: np.ndarray
    F: np.ndarray
    Ez: np.ndarray
    Fz: np.ndarray
    Rbar: np.ndarray
    P: np.ndarray
    H: np.ndarray
    G: np.ndarray
    Theta_star: np.ndarray
    tracking_gain: np.ndarray   # (rho/2) Rbar^{-1} Ez^T
    plan_gain: np.ndarray       # (Q + P)^{-1} P
    direct_gain: np.ndarray     # xi -> u* of the original problem

    @property
    def rho(self) -> float:
        return self.problem.rho

    @property
    def S(self) -> np.ndarray:
        """(rho/2) Ez Rbar^{-1} Ez^T, so that P = (rho/2)(I - S)."""
        return self.Ez @ self.tracking_gain


@dataclass(frozen=True, eq=False)
class TrackingSolution:
    u: np.ndarray
    x: np.ndarray
    value: Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class DirectSolution:
    u: np.ndarray
    x: np.ndarray
    cost: Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class KktSolution:
    r: np.ndarray
    x: np.ndarray
    u: np.ndarray
    nu: np.ndarray


def build_oracle(problem: LayeredProblem) -> TrackingOracle:
    maps = build_stacked_maps(problem)
    E, F = maps.E, maps.F
    Ez, Fz = problem.outputs(E), problem.outputs(F)
    rho = problem.rho
    Qs, Rs = problem.stacked_Q, problem.stacked_R
    n = problem.n_ref

    Rbar = _sym(Rs + 0.5 * rho * Ez.T @ Ez)
    tracking_gain = 0.5 * rho * spd_solve(Rbar, Ez.T, "Rbar")
    S = _sym(Ez @ tracking_gain)
    P = _sym(0.5 * rho * (np.eye(n) - S))
    if np.linalg.eigvalsh(P).min() <= 0:
        raise IllConditionedError("tracking value matrix P lost positive definiteness numerically")

    plan_gain = spd_solve(_sym(Qs + P), P, "Q + P")
    H = _sym(-(2.0 / rho) * P @ plan_gain - S)
    G = -(H + np.eye(n)) @ Fz

    M = _sym(Ez.T @ Qs @ Ez + Rs)
    direct_gain = -spd_solve(M, Ez.T @ Qs @ Fz, "E^T Q E + R")
    Theta_star = -(2.0 / rho) * Qs @ (Fz + Ez @ direct_gain)

    return TrackingOracle(problem=problem, E=E, F=F, Ez=Ez, Fz=Fz, Rbar=Rbar, P=P, H=H, G=G,
                          Theta_star=Theta_star, tracking_gain=tracking_gain, plan_gain=plan_gain,
                          direct_gain=direct_gain)


def optimal_tracking(oracle: TrackingOracle, r_tilde, xi) -> TrackingSolution:
    """Exact minimizer of u^T 𝒭 u + (rho/2)||r~ - z||^2 under the dynamics."""
    problem = oracle.problem
    R_t, single_r = as_batch(r_tilde, problem.n_ref, "reference")
    X, single_x = as_batch(xi, problem.d_x, "initial state")
    single = single_r and single_x

    residual = R_t - oracle.Fz @ X
    u = oracle.tracking_gain @ residual
    x = oracle.E @ u + oracle.F @ X
    value = quad_form(oracle.P, residual)
    if single:
        value = float(value[0])
    return TrackingSolution(u=unbatch(u, single), x=unbatch(x, single), value=value)


def plan_reference(oracle: TrackingOracle, nu, xi) -> np.ndarray:
    """r = (𝒬 + P)^{-1} P (F_z xi - nu)."""
    problem = oracle.problem
    N, single_n = as_batch(nu, problem.n_ref, "dual")
    X, single_x = as_batch(xi, problem.d_x, "initial state")
    r = oracle.plan_gain @ (oracle.Fz @ X - N)
    return unbatch(r, single_n and single_x)


def difference_map(oracle: TrackingOracle) -> Tuple[np.ndarray, np.ndarray]:
    return oracle.H, oracle.G


def optimal_dual_map(oracle: TrackingOracle) -> np.ndarray:
    return oracle.Theta_star


def solve_direct(oracle: TrackingOracle, xi) -> DirectSolution:
    """Optimum of the original unconstrained problem (no reference layer)."""
    problem = oracle.problem
    X, single = as_batch(xi, problem.d_x, "initial state")
    u = oracle.direct_gain @ X
    x = oracle.E @ u + oracle.F @ X
    z = problem.outputs(x)
    cost = quad_form(problem.stacked_Q, z) + quad_form(problem.stacked_R, u)
    if single:
        cost = float(cost[0])
    return DirectSolution(u=unbatch(u, single), x=unbatch(x, single), cost=cost)


def kkt_brute_force(problem: LayeredProblem, xi) -> KktSolution:
    """Solve the redundant problem (variables r, x, u; r = 𝒞x) with one dense KKT system.

    The multiplier of r = 𝒞x is returned scaled, nu = lambda / rho.
    """
    if problem.is_constrained:
        raise ConfigurationError("brute-force KKT solve only handles unconstrained problems")
    x0 = np.asarray(xi, dtype=float)
    if x0.shape != (problem.d_x,):
        raise DimensionError(f"initial state must have length {problem.d_x}, got shape {x0.shape}")

    maps = build_stacked_maps(problem)
    n_r, n_x, n_u = problem.n_ref, problem.n_state, problem.n_input
    n_v = n_r + n_x + n_u

    hess = np.zeros((n_v, n_v))
    hess[:n_r, :n_r] = 2.0 * problem.stacked_Q
    hess[n_r + n_x:, n_r + n_x:] = 2.0 * problem.stacked_R

    a_eq = np.zeros((n_x + n_r, n_v))
    a_eq[:n_x, n_r:n_r + n_x] = np.eye(n_x)
    a_eq[:n_x, n_r + n_x:] = -maps.E
    a_eq[n_x:, :n_r] = np.eye(n_r)
    a_eq[n_x:, n_r:n_r + n_x] = -problem.stacked_C
    b_eq = np.concatenate([maps.F @ x0, np.zeros(n_r)])

    kkt = np.block([[hess, a_eq.T], [a_eq, np.zeros((n_x + n_r, n_x + n_r))]])
    rhs = np.concatenate([np.zeros(n_v), b_eq])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as e:
        raise DegenerateProblemError("KKT matrix of the redundant problem is singular") from e
    if not np.all(np.isfinite(sol)):
        raise DegenerateProblemError("KKT solve produced non-finite values")

    r = sol[:n_r]
    x = sol[n_r:n_r + n_x]
    u = sol[n_r + n_x:n_v]
    lam = sol[n_v + n_x:]
    return KktSolution(r=r, x=x, u=u, nu=lam / problem.rho)
