"""
Linear systems, stacked finite-horizon maps, rollouts and cost evaluation.

Stacked vectors are ordered by time: x = [x_0; x_1; ...; x_T], u = [u_0; ...; u_{T-1}],
r = [r_0; ...; r_T]. Functions that accept a "batch" take samples as columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DimensionError, InfeasibleError

logger = logging.getLogger(__name__)

NILPOTENT_TOL = 1e-12
SYMMETRY_TOL = 1e-10

Scalar = Union[float, np.ndarray]


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def _matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite entries")
    return arr


def _symmetric(M: np.ndarray, name: str) -> np.ndarray:
    if M.shape[0] != M.shape[1]:
        raise ConfigurationError(f"{name} must be square, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if np.max(np.abs(M - M.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ConfigurationError(f"{name} must be symmetric")
    return 0.5 * (M + M.T)


def as_batch(values, dim: int, name: str) -> Tuple[np.ndarray, bool]:
    """Return `values` as a (dim, n) array and whether a single vector was given."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr, single = arr[:, None], True
    elif arr.ndim == 2:
        single = False
    else:
        raise DimensionError(f"{name} must be a vector or a batch of column vectors")
    if arr.shape[0] != dim:
        raise DimensionError(f"{name} must have length {dim}, got {arr.shape[0]}")
    return arr, single


def unbatch(arr: np.ndarray, single: bool) -> np.ndarray:
    return arr[:, 0] if single else arr


def quad_form(M: np.ndarray, v: np.ndarray) -> Scalar:
    """v^T M v for a vector, or per column for a batch."""
    value = np.einsum("i...,ij,j...->...", v, M, v)
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """Plant x_{t+1} = A x_t + B u_t."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _matrix(self.A, "A")
        B = _matrix(self.B, "B")
        if A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"A must be square, got shape {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ConfigurationError(f"B must have {A.shape[0]} rows to match A, got shape {B.shape}")
        object.__setattr__(self, "A", _readonly(A))
        object.__setattr__(self, "B", _readonly(B))

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]

    @cached_property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


@dataclass(frozen=True, eq=False)
class OutputMap:
    """Linear output z = C x on which references, costs and constraints are defined."""

    C: np.ndarray

    def __post_init__(self):
        C = _matrix(self.C, "C")
        if C.shape[0] > C.shape[1]:
            raise ConfigurationError(f"output map has more rows ({C.shape[0]}) than states ({C.shape[1]})")
        object.__setattr__(self, "C", _readonly(C))

    @classmethod
    def identity(cls, d_x: int) -> "OutputMap":
        return cls(np.eye(d_x))

    @classmethod
    def select(cls, d_x: int, indices) -> "OutputMap":
        return cls(np.eye(d_x)[list(indices)])

    @property
    def d_z(self) -> int:
        return self.C.shape[0]

    @property
    def d_x(self) -> int:
        return self.C.shape[1]

    @cached_property
    def is_identity(self) -> bool:
        return self.d_z == self.d_x and bool(np.array_equal(self.C, np.eye(self.d_x)))

    def stacked(self, T: int) -> np.ndarray:
        return np.kron(np.eye(T + 1), self.C)


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Box bounds on the stacked reference; -inf/+inf mark missing bounds."""

    lower: np.ndarray
    upper: np.ndarray
    free_initial: bool = False

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise DimensionError(f"bound lengths differ: {lower.size} vs {upper.size}")
        if np.isnan(lower).any() or np.isnan(upper).any():
            raise ConfigurationError("bounds must not be NaN")
        if np.isposinf(lower).any() or np.isneginf(upper).any() or np.any(lower > upper):
            raise InfeasibleError("constraint box is empty (lower > upper somewhere)")
        object.__setattr__(self, "lower", _readonly(lower))
        object.__setattr__(self, "upper", _readonly(upper))

    @classmethod
    def unconstrained(cls, T: int, d_z: int) -> "ConstraintSpec":
        n = (T + 1) * d_z
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def state_floor(cls, T: int, d_z: int, bound: float, free_initial: bool = True) -> "ConstraintSpec":
        n = (T + 1) * d_z
        return cls(np.full(n, float(bound)), np.full(n, np.inf), free_initial=free_initial)

    def effective_bounds(self, d_z: int) -> Tuple[np.ndarray, np.ndarray]:
        lower = np.array(self.lower)
        upper = np.array(self.upper)
        if self.free_initial:
            lower[:d_z] = -np.inf
            upper[:d_z] = np.inf
        return lower, upper

    def is_unconstrained(self, d_z: int) -> bool:
        lower, upper = self.effective_bounds(d_z)
        return bool(np.all(np.isneginf(lower)) and np.all(np.isposinf(upper)))


@dataclass(frozen=True, eq=False)
class LayeredProblem:
    """Finite-horizon problem: minimize z^T 𝒬 z + u^T 𝒭 u with z = 𝒞x, x_0 = xi, z in the box."""

    system: LtiSystem
    T: int
    Q: np.ndarray
    R: np.ndarray
    rho: float
    output: Optional[OutputMap] = None
    constraints: Optional[ConstraintSpec] = None

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError(f"horizon T must be a positive integer, got {self.T}")
        object.__setattr__(self, "T", int(self.T))
        if not np.isfinite(self.rho) or self.rho <= 0:
            raise ConfigurationError(f"penalty rho must be positive, got {self.rho}")
        object.__setattr__(self, "rho", float(self.rho))

        output = self.output if self.output is not None else OutputMap.identity(self.system.d_x)
        if output.d_x != self.system.d_x:
            raise ConfigurationError(f"output map expects {output.d_x} states, system has {self.system.d_x}")
        object.__setattr__(self, "output", output)

        Q = _symmetric(_matrix(self.Q, "Q"), "Q")
        R = _symmetric(_matrix(self.R, "R"), "R")
        if Q.shape != (output.d_z, output.d_z):
            raise ConfigurationError(f"Q must be {output.d_z}x{output.d_z}, got {Q.shape}")
        if R.shape != (self.system.d_u, self.system.d_u):
            raise ConfigurationError(f"R must be {self.system.d_u}x{self.system.d_u}, got {R.shape}")
        if np.linalg.eigvalsh(Q).min() < -SYMMETRY_TOL * max(1.0, np.abs(Q).max()):
            raise ConfigurationError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ConfigurationError("R must be positive definite")
        object.__setattr__(self, "Q", _readonly(Q))
        object.__setattr__(self, "R", _readonly(R))

        constraints = self.constraints
        if constraints is None:
            constraints = ConstraintSpec.unconstrained(self.T, output.d_z)
        if constraints.lower.size != (self.T + 1) * output.d_z:
            raise DimensionError(
                f"constraints must have length {(self.T + 1) * output.d_z}, got {constraints.lower.size}")
        object.__setattr__(self, "constraints", constraints)

    @property
    def d_x(self) -> int:
        return self.system.d_x

    @property
    def d_u(self) -> int:
        return self.system.d_u

    @property
    def d_z(self) -> int:
        return self.output.d_z

    @property
    def n_state(self) -> int:
        return (self.T + 1) * self.d_x

    @property
    def n_input(self) -> int:
        return self.T * self.d_u

    @property
    def n_ref(self) -> int:
        return (self.T + 1) * self.d_z

    @cached_property
    def stacked_Q(self) -> np.ndarray:
        return np.kron(np.eye(self.T + 1), self.Q)

    @cached_property
    def stacked_R(self) -> np.ndarray:
        return np.kron(np.eye(self.T), self.R)

    @cached_property
    def stacked_C(self) -> np.ndarray:
        return self.output.stacked(self.T)

    @property
    def is_constrained(self) -> bool:
        return not self.constraints.is_unconstrained(self.d_z)

    def outputs(self, x: np.ndarray) -> np.ndarray:
        """Stacked z = 𝒞x; the identity map returns x itself."""
        if self.output.is_identity:
            return x
        return self.stacked_C @ x

    def sample_initial_states(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """i.i.d. standard-normal initial conditions, shape (d_x, count)."""
        return rng.standard_normal((count, self.d_x)).T

    def with_constraints(self, constraints: Optional[ConstraintSpec]) -> "LayeredProblem":
        return replace(self, constraints=constraints)

    def with_rho(self, rho: float) -> "LayeredProblem":
        return replace(self, rho=rho)


def make_problem(system: LtiSystem, T: int, q_weight: float = 1.0, r_weight: float = 0.01,
                 rho: float = 2.0, output: Optional[OutputMap] = None,
                 constraints: Optional[ConstraintSpec] = None) -> LayeredProblem:
    d_z = output.d_z if output is not None else system.d_x
    return LayeredProblem(system=system, T=T, Q=q_weight * np.eye(d_z), R=r_weight * np.eye(system.d_u),
                          rho=rho, output=output, constraints=constraints)


@dataclass(frozen=True, eq=False)
class Trajectory:
    x: np.ndarray
    u: np.ndarray
    r: np.ndarray

    def states(self, d_x: int) -> np.ndarray:
        return self.x.reshape(-1, d_x)

    def inputs(self, d_u: int) -> np.ndarray:
        return self.u.reshape(-1, d_u)


@dataclass(frozen=True, eq=False)
class StackedMaps:
    """x = E u + F xi over the whole horizon."""

    E: np.ndarray
    F: np.ndarray


@dataclass(frozen=True)
class CostBreakdown:
    state_cost: float
    input_cost: float
    tracking_penalty: float


def build_stacked_maps(problem: LayeredProblem) -> StackedMaps:
    A, B = problem.system.A, problem.system.B
    d_x, d_u, T = problem.d_x, problem.d_u, problem.T

    powers = [np.eye(d_x)]
    for _ in range(T):
        powers.append(A @ powers[-1])
    F = np.vstack(powers)

    E = np.zeros(((T + 1) * d_x, T * d_u))
    for t in range(1, T + 1):
        for j in range(t):
            E[t * d_x:(t + 1) * d_x, j * d_u:(j + 1) * d_u] = powers[t - 1 - j] @ B
    return StackedMaps(E=_readonly(E), F=_readonly(F))


def rollout(problem: LayeredProblem, xi, inputs, reference=None) -> Trajectory:
    """Simulate the plant step by step from xi under the stacked inputs."""
    A, B = problem.system.A, problem.system.B
    d_x, d_u, T = problem.d_x, problem.d_u, problem.T

    x0 = np.asarray(xi, dtype=float)
    if x0.shape != (d_x,):
        raise DimensionError(f"initial state must have length {d_x}, got shape {x0.shape}")
    u = np.asarray(inputs, dtype=float)
    if u.shape != (T * d_u,):
        raise DimensionError(f"inputs must have length {T * d_u}, got shape {u.shape}")
    if reference is None:
        r = np.zeros(problem.n_ref)
    else:
        r = np.asarray(reference, dtype=float)
        if r.shape != (problem.n_ref,):
            raise DimensionError(f"reference must have length {problem.n_ref}, got shape {r.shape}")

    states = np.empty((T + 1, d_x))
    states[0] = x0
    steps = u.reshape(T, d_u)
    for t in range(T):
        states[t + 1] = A @ states[t] + B @ steps[t]
    return Trajectory(x=states.reshape(-1), u=u.copy(), r=r.copy())


def eval_costs(problem: LayeredProblem, traj: Trajectory, nu=None) -> CostBreakdown:
    if traj.x.shape != (problem.n_state,) or traj.u.shape != (problem.n_input,) \
            or traj.r.shape != (problem.n_ref,):
        raise DimensionError("trajectory dimensions do not match the problem")
    nu = np.zeros(problem.n_ref) if nu is None else np.asarray(nu, dtype=float)
    if nu.shape != (problem.n_ref,):
        raise DimensionError(f"dual must have length {problem.n_ref}, got shape {nu.shape}")

    gap = traj.r + nu - problem.outputs(traj.x)
    return CostBreakdown(
        state_cost=quad_form(problem.stacked_Q, traj.r),
        input_cost=quad_form(problem.stacked_R, traj.u),
        tracking_penalty=0.5 * problem.rho * float(gap @ gap),
    )


def executed_cost(problem: LayeredProblem, x: np.ndarray, u: np.ndarray) -> Scalar:
    """Closed-loop cost z^T 𝒬 z + u^T 𝒭 u of executed trajectories (vector or columns)."""
    z = problem.outputs(x)
    return quad_form(problem.stacked_Q, z) + quad_form(problem.stacked_R, u)


def tracking_deviation(problem: LayeredProblem, r: np.ndarray, x: np.ndarray) -> Scalar:
    """(1/T) sum_{t=1..T} ||r_t - C x_t||_2."""
    gap = np.asarray(r) - problem.outputs(x)
    blocks = gap.reshape((problem.T + 1, problem.d_z) + gap.shape[1:])
    value = np.linalg.norm(blocks[1:], axis=1).mean(axis=0)
    return float(value) if np.ndim(value) == 0 else value


def constraint_violation(problem: LayeredProblem, x: np.ndarray) -> Scalar:
    """Mean bound violation of z = 𝒞x over the bounded coordinates."""
    lower, upper = problem.constraints.effective_bounds(problem.d_z)
    z = problem.outputs(x)
    has_lower = np.isfinite(lower)
    has_upper = np.isfinite(upper)
    bounded = has_lower | has_upper
    if not bounded.any():
        return 0.0 if z.ndim == 1 else np.zeros(z.shape[1])

    lo = np.where(has_lower, lower, 0.0)
    hi = np.where(has_upper, upper, 0.0)
    if z.ndim == 2:
        lo, hi = lo[:, None], hi[:, None]
        has_lower, has_upper = has_lower[:, None], has_upper[:, None]
    below = np.where(has_lower, np.maximum(lo - z, 0.0), 0.0)
    above = np.where(has_upper, np.maximum(z - hi, 0.0), 0.0)
    value = (below + above)[bounded].mean(axis=0)
    return float(value) if np.ndim(value) == 0 else value


def sample_system(seed: int, d_x: int, d_u: int, target_spectral_radius: float = 1.0) -> LtiSystem:
    """Gaussian (A, B) with A rescaled to the requested spectral radius."""
    if target_spectral_radius <= 0:
        raise ConfigurationError(f"target spectral radius must be positive, got {target_spectral_radius}")
    current = int(seed)
    while True:
        rng = np.random.default_rng(current)
        A = rng.standard_normal((d_x, d_x))
        B = rng.standard_normal((d_x, d_u))
        radius = float(np.max(np.abs(np.linalg.eigvals(A))))
        if radius >= NILPOTENT_TOL:
            break
        logger.warning("Seed %d gave a nilpotent A (spectral radius %.3g); resampling with seed %d",
                       current, radius, current + 1)
        current += 1
    return LtiSystem(A * (target_spectral_radius / radius), B)
