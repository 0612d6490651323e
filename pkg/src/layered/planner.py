"""
Trajectory planning against a quadratic tracking value, optionally on a box.

The planner minimizes r^T 𝒬 r + p(r + nu_hat; xi) over r in the box, where
p(r~; xi) = r~^T W_rr r~ + 2 r~^T W_rx xi + xi^T W_xx xi is the tracking value (exact or learned).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .core import ConstraintSpec, LayeredProblem, as_batch, executed_cost, unbatch
from .errors import ConfigurationError, DimensionError, IllConditionedError, InfeasibleError
from .oracle import TrackingOracle, optimal_tracking

logger = logging.getLogger(__name__)

KKT_TOL = 1e-9
EIGEN_FLOOR = 1e-8
WARMUP_STEPS = 20


@dataclass(frozen=True, eq=False)
class BoxQp:
    """minimize 0.5 z^T M z + q^T z  s.t. lower <= z <= upper."""

    M: np.ndarray
    q: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    tol: float = KKT_TOL
    max_iter: int = 500

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        n = M.shape[0]
        if M.shape != (n, n):
            raise DimensionError(f"M must be square, got shape {M.shape}")
        q = np.asarray(self.q, dtype=float).reshape(-1)
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if not (q.size == lower.size == upper.size == n):
            raise DimensionError(f"q and bounds must have length {n}")
        if np.any(lower > upper) or np.isposinf(lower).any() or np.isneginf(upper).any():
            raise InfeasibleError("box is empty (lower > upper somewhere)")
        if np.max(np.abs(M - M.T), initial=0.0) > 1e-10 * max(1.0, np.abs(M).max(initial=0.0)):
            raise ConfigurationError("QP matrix must be symmetric")
        M = 0.5 * (M + M.T)
        if n and np.linalg.eigvalsh(M).min() <= 0:
            raise ConfigurationError("QP matrix must be positive definite")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.M @ z + self.q @ z)

    def kkt_residual(self, z: np.ndarray) -> float:
        """||z - proj(z - grad)||_inf; zero exactly at the box-constrained minimizer."""
        grad = self.M @ z + self.q
        return float(np.max(np.abs(z - np.clip(z - grad, self.lower, self.upper)), initial=0.0))


@dataclass(frozen=True, eq=False)
class BoxQpResult:
    z: np.ndarray
    active_set: np.ndarray   # -1 at lower bound, +1 at upper bound, 0 free
    kkt_residual: float
    objective: float
    iterations: int
    converged: bool


def _active_set(qp: BoxQp, z: np.ndarray) -> np.ndarray:
    active = np.zeros(qp.n, dtype=int)
    active[z >= qp.upper] = 1
    active[z <= qp.lower] = -1
    return active


def _projected_gradient_step(qp: BoxQp, z: np.ndarray) -> np.ndarray:
    """Exact line search along the projected-gradient direction."""
    grad = qp.M @ z + qp.q
    direction = np.clip(z - grad, qp.lower, qp.upper) - z
    curvature = float(direction @ qp.M @ direction)
    slope = float(grad @ direction)
    step = 1.0 if curvature <= 0 else min(1.0, -slope / curvature)
    return np.clip(z + step * direction, qp.lower, qp.upper)


def _clamped(qp: BoxQp, z: np.ndarray) -> np.ndarray:
    """Working set at z: bounds that the gradient pushes against."""
    grad = qp.M @ z + qp.q
    working = np.zeros(qp.n, dtype=int)
    working[(z <= qp.lower) & (grad >= 0)] = -1
    working[(z >= qp.upper) & (grad <= 0)] = 1
    return working


def _subspace_minimizer(qp: BoxQp, z: np.ndarray, working: np.ndarray) -> np.ndarray:
    """Minimize over the free coordinates with the working bounds held fixed."""
    free = working == 0
    target = z.copy()
    if free.any():
        fixed = ~free
        rhs = -(qp.q[free] + qp.M[np.ix_(free, fixed)] @ z[fixed])
        target[free] = linalg.cho_solve(linalg.cho_factor(qp.M[np.ix_(free, free)]), rhs)
    return target


def _active_set_phase(qp: BoxQp, z: np.ndarray, max_iter: int):
    """Primal active-set iterations from a feasible z; returns (z, iterations, optimal)."""
    working = _clamped(qp, z)
    z = np.where(working == -1, qp.lower, np.where(working == 1, qp.upper, z))
    for iteration in range(1, max_iter + 1):
        target = _subspace_minimizer(qp, z, working)
        d = target - z
        free = working == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(free & (d < 0), (qp.lower - z) / d,
                              np.where(free & (d > 0), (qp.upper - z) / d, np.inf))
        blocking = int(np.argmin(ratios)) if ratios.size else 0
        if ratios.size and ratios[blocking] < 1.0:
            alpha = max(float(ratios[blocking]), 0.0)
            z = np.clip(z + alpha * d, qp.lower, qp.upper)
            working[blocking] = -1 if d[blocking] < 0 else 1
            z[blocking] = qp.lower[blocking] if d[blocking] < 0 else qp.upper[blocking]
            continue

        z = np.clip(target, qp.lower, qp.upper)
        grad = qp.M @ z + qp.q
        # multipliers of the working bounds; all must be nonnegative at the optimum
        multipliers = np.where(working == -1, grad, np.where(working == 1, -grad, np.inf))
        release = int(np.argmin(multipliers)) if multipliers.size else 0
        if not multipliers.size or multipliers[release] >= -1e-3 * qp.tol:
            return z, iteration, True
        working[release] = 0
    return z, max_iter, False


def solve_box_qp(qp: BoxQp, z0: Optional[np.ndarray] = None) -> BoxQpResult:
    """Projected-gradient warm-up, then primal active-set iterations on the box KKT conditions."""
    lower, upper = qp.lower, qp.upper
    if np.all(np.isneginf(lower)) and np.all(np.isposinf(upper)):
        z = linalg.cho_solve(linalg.cho_factor(qp.M), -qp.q) if qp.n else np.zeros(0)
        return BoxQpResult(z=z, active_set=np.zeros(qp.n, dtype=int), kkt_residual=qp.kkt_residual(z),
                           objective=qp.objective(z), iterations=0, converged=True)

    start = np.zeros(qp.n) if z0 is None else np.asarray(z0, dtype=float)
    z = np.clip(start, lower, upper)
    residual = qp.kkt_residual(z)
    iterations = 0
    while residual > qp.tol and iterations < min(WARMUP_STEPS, qp.max_iter):
        iterations += 1
        z = _projected_gradient_step(qp, z)
        residual = qp.kkt_residual(z)

    if residual > qp.tol:
        z, steps, _ = _active_set_phase(qp, z, max(1, qp.max_iter - iterations))
        iterations += steps
        residual = qp.kkt_residual(z)

    converged = residual <= qp.tol
    if not converged:
        logger.warning("Box QP stopped after %d iterations with KKT residual %.3g", iterations, residual)
    return BoxQpResult(z=z, active_set=_active_set(qp, z), kkt_residual=residual, objective=qp.objective(z),
                       iterations=iterations, converged=converged)


@dataclass(frozen=True, eq=False)
class ValueQuadratic:
    """p(r~; xi) = r~^T W_rr r~ + 2 r~^T W_rx xi + xi^T W_xx xi."""

    W_rr: np.ndarray
    W_rx: np.ndarray
    W_xx: np.ndarray

    def __post_init__(self):
        W_rr = np.asarray(self.W_rr, dtype=float)
        W_rx = np.asarray(self.W_rx, dtype=float)
        W_xx = np.asarray(self.W_xx, dtype=float)
        if not (np.all(np.isfinite(W_rr)) and np.all(np.isfinite(W_rx)) and np.all(np.isfinite(W_xx))):
            raise IllConditionedError("value quadratic has non-finite entries")
        object.__setattr__(self, "W_rr", 0.5 * (W_rr + W_rr.T))
        object.__setattr__(self, "W_xx", 0.5 * (W_xx + W_xx.T))
        object.__setattr__(self, "W_rx", W_rx)

    @classmethod
    def from_oracle(cls, oracle: TrackingOracle) -> "ValueQuadratic":
        PF = oracle.P @ oracle.Fz
        return cls(W_rr=oracle.P, W_rx=-PF, W_xx=oracle.Fz.T @ PF)

    def evaluate(self, r_tilde, xi):
        R, single_r = as_batch(r_tilde, self.W_rr.shape[0], "reference")
        X, single_x = as_batch(xi, self.W_rx.shape[1], "initial state")
        value = np.einsum("ib,ij,jb->b", R, self.W_rr, R) + 2.0 * np.einsum("ib,ij,jb->b", R, self.W_rx, X) \
            + np.einsum("ib,ij,jb->b", X, self.W_xx, X)
        return float(value[0]) if single_r and single_x else value


def _planning_hessian(problem: LayeredProblem, value: ValueQuadratic) -> np.ndarray:
    H = problem.stacked_Q + value.W_rr
    H = 0.5 * (H + H.T)
    try:
        eigvals, eigvecs = np.linalg.eigh(H)
    except np.linalg.LinAlgError as e:
        raise IllConditionedError(f"planning Hessian eigendecomposition failed: {e}") from e
    floor = EIGEN_FLOOR * max(1.0, float(eigvals.max()))
    if eigvals.min() < floor:
        logger.debug("Planning Hessian has eigenvalue %.3g; clipping to %.3g", eigvals.min(), floor)
        H = (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T
    return 2.0 * H


def plan_constrained(problem: LayeredProblem, value: ValueQuadratic, nu_hat, xi,
                     constraints: Optional[ConstraintSpec] = None) -> np.ndarray:
    """argmin_r r^T 𝒬 r + p(r + nu_hat; xi) over the box (problem constraints by default)."""
    constraints = problem.constraints if constraints is None else constraints
    if constraints.lower.size != problem.n_ref:
        raise DimensionError(f"constraints must have length {problem.n_ref}, got {constraints.lower.size}")
    N, single_n = as_batch(nu_hat, problem.n_ref, "dual")
    X, single_x = as_batch(xi, problem.d_x, "initial state")
    if value.W_rr.shape != (problem.n_ref, problem.n_ref) or value.W_rx.shape != (problem.n_ref, problem.d_x):
        raise DimensionError("value quadratic does not match the problem dimensions")
    if not (np.all(np.isfinite(N)) and np.all(np.isfinite(X))):
        raise IllConditionedError("dual prediction or initial state is not finite")

    M = _planning_hessian(problem, value)
    Q_lin = 2.0 * (value.W_rr @ N + value.W_rx @ X)
    lower, upper = constraints.effective_bounds(problem.d_z)
    if np.all(np.isneginf(lower)) and np.all(np.isposinf(upper)):
        r = linalg.cho_solve(linalg.cho_factor(M), -Q_lin)
    else:
        columns = max(N.shape[1], X.shape[1])
        Q_lin = np.broadcast_to(Q_lin, (problem.n_ref, columns))
        r = np.empty((problem.n_ref, columns))
        for i in range(columns):
            result = solve_box_qp(BoxQp(M=M, q=Q_lin[:, i], lower=lower, upper=upper))
            r[:, i] = result.z
    return unbatch(r, single_n and single_x)


def plan_heuristic(problem: LayeredProblem, value: ValueQuadratic, xi,
                   constraints: Optional[ConstraintSpec] = None) -> np.ndarray:
    """Plan with nu_hat = 0; the result is tracked as is."""
    X, single = as_batch(xi, problem.d_x, "initial state")
    r = plan_constrained(problem, value, np.zeros((problem.n_ref, X.shape[1])), X, constraints)
    return unbatch(r, single)


@dataclass(frozen=True, eq=False)
class ConstrainedSolution:
    r: np.ndarray
    x: np.ndarray
    u: np.ndarray
    nu: np.ndarray
    cost: float
    iterations: int
    converged: bool


def solve_constrained_direct(problem: LayeredProblem, oracle: TrackingOracle, xi,
                             tol: float = 1e-9, max_iter: int = 20000) -> ConstrainedSolution:
    """Method of multipliers on r = 𝒞x: box planning, exact tracking, nu <- nu + (r - z)."""
    x0 = np.asarray(xi, dtype=float)
    if x0.shape != (problem.d_x,):
        raise DimensionError(f"initial state must have length {problem.d_x}, got shape {x0.shape}")
    value = ValueQuadratic.from_oracle(oracle)
    M = _planning_hessian(problem, value)
    lower, upper = problem.constraints.effective_bounds(problem.d_z)
    shift = value.W_rx @ x0
    nu = np.zeros(problem.n_ref)
    r = x = u = None
    gap = np.inf
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        qp = BoxQp(M=M, q=2.0 * (value.W_rr @ nu + shift), lower=lower, upper=upper)
        r = solve_box_qp(qp, z0=r).z
        tracked = optimal_tracking(oracle, r + nu, x0)
        x, u = tracked.x, tracked.u
        residual = r - problem.outputs(x)
        nu = nu + residual
        gap = float(np.max(np.abs(residual)))
        if gap <= tol:
            break
    converged = gap <= tol
    if not converged:
        logger.warning("Method of multipliers stopped after %d iterations with consensus gap %.3g",
                       iterations, gap)
    return ConstrainedSolution(r=r, x=x, u=u, nu=nu, cost=float(executed_cost(problem, x, u)),
                               iterations=iterations, converged=converged)
