"""
Learned tracking layer on the augmented system s_t = [x_t; r~_{t+1}; ...; r~_{t+L}].

The reference window advances by a block upshift (zero-padded past the horizon) and the
stage cost of step t is (rho/2)||C x_{t+1} - r~_{t+1}||^2 + u_t^T R u_t. Policies are linear in
the augmented state and critics are quadratic in (s, u); learning is least-squares policy
iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg

from .core import LayeredProblem, as_batch, unbatch
from .errors import ConfigurationError, DimensionError, InvalidArgumentError
from .oracle import TrackingOracle
from .perturbation import PerturbationSpec
from .planner import ValueQuadratic

logger = logging.getLogger(__name__)

MAX_RIDGE = 1.0
FIT_CONDITION_LIMIT = 1e8
RESIDUAL_FORM_TOL = 1e-6
ADOPT_TOL = 1e-6
VALIDATION_EPISODES = 32


@dataclass(frozen=True, eq=False)
class AugmentedEnv:
    problem: LayeredProblem
    window: Optional[int] = None

    def __post_init__(self):
        window = self.problem.T if self.window is None else self.window
        if int(window) != window or window < 1:
            raise ConfigurationError(f"lookahead window must be a positive integer, got {window}")
        object.__setattr__(self, "window", int(window))

    @property
    def L(self) -> int:
        return self.window

    @property
    def n_s(self) -> int:
        return self.problem.d_x + self.window * self.problem.d_z

    @property
    def n_z(self) -> int:
        return self.n_s + self.problem.d_u

    @cached_property
    def transition(self) -> Tuple[np.ndarray, np.ndarray]:
        """(A_aug, B_aug) with the block upshift on the reference window."""
        p = self.problem
        d_x, d_z, n_s = p.d_x, p.d_z, self.n_s
        A_aug = np.zeros((n_s, n_s))
        A_aug[:d_x, :d_x] = p.system.A
        A_aug[d_x:, d_x:] = np.eye(self.window * d_z, k=d_z)
        B_aug = np.zeros((n_s, p.d_u))
        B_aug[:d_x] = p.system.B
        return A_aug, B_aug

    @cached_property
    def stage_cost(self) -> np.ndarray:
        """Stage cost as a quadratic form in z = [s; u]."""
        p = self.problem
        C, A, B = p.output.C, p.system.A, p.system.B
        Phi = np.zeros((p.d_z, self.n_z))
        Phi[:, :p.d_x] = C @ A
        Phi[:, p.d_x:p.d_x + p.d_z] = -np.eye(p.d_z)
        Phi[:, self.n_s:] = C @ B
        cost = 0.5 * p.rho * Phi.T @ Phi
        cost[self.n_s:, self.n_s:] += p.R
        return cost

    def reference_window(self, r_tilde: np.ndarray, t: int) -> np.ndarray:
        """Blocks r~_{t+1..t+L} of a (n_ref, B) batch, zero past the horizon."""
        p = self.problem
        blocks = r_tilde.reshape(p.T + 1, p.d_z, -1)
        window = np.zeros((self.window, p.d_z, blocks.shape[2]))
        upcoming = blocks[t + 1:t + 1 + self.window]
        window[:upcoming.shape[0]] = upcoming
        return window.reshape(self.window * p.d_z, -1)

    def initial_state(self, xi, r_tilde) -> np.ndarray:
        p = self.problem
        X, single_x = as_batch(xi, p.d_x, "initial state")
        R, single_r = as_batch(r_tilde, p.n_ref, "reference")
        if X.shape[1] != R.shape[1]:
            X, R = _broadcast_pair(X, R)
        return unbatch(np.vstack([X, self.reference_window(R, 0)]), single_x and single_r)


def _broadcast_pair(X: np.ndarray, R: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if X.shape[1] == 1:
        X = np.repeat(X, R.shape[1], axis=1)
    elif R.shape[1] == 1:
        R = np.repeat(R, X.shape[1], axis=1)
    else:
        raise DimensionError(f"batch sizes differ: {X.shape[1]} initial states, {R.shape[1]} references")
    return X, R


def augmented_step(env: AugmentedEnv, s_aug, u):
    """One transition; returns (next augmented state, stage cost)."""
    p = env.problem
    S, single_s = as_batch(s_aug, env.n_s, "augmented state")
    U, single_u = as_batch(u, p.d_u, "input")
    x_next = p.system.A @ S[:p.d_x] + p.system.B @ U
    gap = p.output.C @ x_next - S[p.d_x:p.d_x + p.d_z]
    cost = 0.5 * p.rho * np.einsum("ib,ib->b", gap, gap) + np.einsum("ib,ij,jb->b", U, p.R, U)
    window = np.zeros_like(S[p.d_x:])
    window[:-p.d_z] = S[p.d_x + p.d_z:]
    s_next = np.vstack([x_next, window])
    single = single_s and single_u
    return unbatch(s_next, single), (float(cost[0]) if single else cost)


@dataclass(frozen=True, eq=False)
class TrackingPolicy:
    """u_t = K_t s_t; a time-invariant policy stores a single gain."""

    gains: np.ndarray
    time_varying: bool = False

    @classmethod
    def zeros(cls, env: AugmentedEnv, time_varying: bool = False) -> "TrackingPolicy":
        count = env.problem.T if time_varying else 1
        return cls(np.zeros((count, env.problem.d_u, env.n_s)), time_varying)

    def gain(self, t: int) -> np.ndarray:
        return self.gains[t if self.time_varying else 0]

    def act(self, t: int, s: np.ndarray) -> np.ndarray:
        return self.gain(t) @ s


@dataclass(frozen=True, eq=False)
class QuadraticCritic:
    """Q_t(s, u) = z^T M_t z with z = [s; u]."""

    matrices: np.ndarray
    n_s: int
    time_varying: bool = False

    def matrix(self, t: int) -> np.ndarray:
        return self.matrices[t if self.time_varying else 0]

    def value_matrix(self, t: int, policy: TrackingPolicy) -> np.ndarray:
        """W_t with V_t(s) = s^T W_t s under u = K_t s."""
        lift = np.vstack([np.eye(self.n_s), policy.gain(t)])
        W = lift.T @ self.matrix(t) @ lift
        return 0.5 * (W + W.T)


@dataclass(frozen=True, eq=False)
class Episode:
    states: np.ndarray    # (T+1, n_s, B)
    actions: np.ndarray   # (T, d_u, B)
    costs: np.ndarray     # (T, B)
    d_x: int

    @property
    def x(self) -> np.ndarray:
        """Stacked executed states, one column per episode."""
        return self.states[:, :self.d_x, :].reshape(-1, self.states.shape[2])

    @property
    def u(self) -> np.ndarray:
        return self.actions.reshape(-1, self.actions.shape[2])

    @property
    def total_cost(self) -> np.ndarray:
        return self.costs.sum(axis=0)


def rollout_policy(env: AugmentedEnv, policy: TrackingPolicy, xi, r_tilde,
                   rng: Optional[np.random.Generator] = None, noise_std: float = 0.0) -> Episode:
    p = env.problem
    s = env.initial_state(xi, r_tilde)
    if s.ndim == 1:
        s = s[:, None]
    batch = s.shape[1]
    states = np.empty((p.T + 1, env.n_s, batch))
    actions = np.empty((p.T, p.d_u, batch))
    costs = np.empty((p.T, batch))
    states[0] = s
    for t in range(p.T):
        u = policy.act(t, states[t])
        if rng is not None and noise_std > 0:
            u = u + noise_std * rng.standard_normal((p.d_u, batch))
        actions[t] = u
        states[t + 1], costs[t] = augmented_step(env, states[t], u)
    return Episode(states=states, actions=actions, costs=costs, d_x=p.d_x)


@dataclass(frozen=True)
class TrackingConfig:
    window: Optional[int] = None
    time_varying: bool = True
    iterations: int = 5
    sweeps: int = 3
    noise_std: float = 0.01
    explore_std: float = 1.0
    reference_std: float = 1.0
    ridge: float = 1e-8
    sample_factor: float = 1.5

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ConfigurationError(f"lookahead window must be >= 1, got {self.window}")
        if self.iterations < 1 or self.sweeps < 1:
            raise ConfigurationError("iterations and sweeps must be >= 1")
        if self.noise_std < 0 or self.explore_std < 0 or self.reference_std < 0:
            raise ConfigurationError("noise and reference scales must be nonnegative")
        if not self.ridge > 0:
            raise ConfigurationError(f"ridge must be positive, got {self.ridge}")
        if not self.sample_factor >= 1:
            raise ConfigurationError(f"sample_factor must be >= 1, got {self.sample_factor}")


def _quadratic_features(Z: np.ndarray) -> np.ndarray:
    """Rows phi(z) with phi(z) . upper(M) = z^T M z."""
    rows, cols = np.triu_indices(Z.shape[0])
    weights = np.where(rows == cols, 1.0, 2.0)
    return (Z[rows] * Z[cols] * weights[:, None]).T


def _unpack_symmetric(w: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    M[np.triu_indices(n)] = w
    return M + M.T - np.diag(np.diag(M))


def _regularized_fit(Phi: np.ndarray, y: np.ndarray, ridge: float,
                     condition_limit: float = FIT_CONDITION_LIMIT) -> Tuple[np.ndarray, float, bool]:
    """Ridge regression on unit-RMS feature columns; returns (w, ridge used, ok).

    Columns that are identically zero get a zero coefficient. The ridge grows 100x at a time
    until the Gram matrix is well conditioned; a fit that needs MAX_RIDGE is not ok.
    """
    w = np.zeros(Phi.shape[1])
    with np.errstate(over="ignore", invalid="ignore"):
        scale = np.sqrt(np.mean(Phi ** 2, axis=0))
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(y))):
        return w, ridge, False
    keep = scale > 0
    if not keep.any():
        return w, ridge, True
    Ps = Phi[:, keep] / scale[keep]
    gram = Ps.T @ Ps / Ps.shape[0]
    b = Ps.T @ y / Ps.shape[0]
    eigvals = linalg.eigvalsh(gram)
    while (eigvals[-1] + ridge) > condition_limit * (eigvals[0] + ridge):
        ridge = min(ridge * 100.0, MAX_RIDGE)
        if ridge >= MAX_RIDGE or math.isclose(ridge, MAX_RIDGE):
            return w, MAX_RIDGE, False
    try:
        w[keep] = linalg.solve(gram + ridge * np.eye(gram.shape[0]), b, assume_a="pos") / scale[keep]
    except linalg.LinAlgError:
        return w, ridge, False
    return w, ridge, True


def _greedy_gain(M: np.ndarray, n_s: int) -> np.ndarray:
    """argmin_u of z^T M z: K = -M_uu^{-1} M_us."""
    return -np.linalg.solve(M[n_s:, n_s:], M[n_s:, :n_s])


class TrackingLearner:
    """Least-squares policy iteration over recorded episodes.

    A fit waits until enough episodes are pending to identify the critic. Its greedy policy
    replaces the current one only if the cost on a fixed validation set does not go up.
    """

    def __init__(self, env: AugmentedEnv, config: TrackingConfig, rng: Optional[np.random.Generator] = None):
        self.env = env
        self.config = config
        self.policy = TrackingPolicy.zeros(env, config.time_varying)
        self.critic: Optional[QuadraticCritic] = None
        self.rank_deficient = False
        self.ridge = config.ridge
        self._episodes: List[Episode] = []

        rng = np.random.default_rng(0) if rng is None else rng
        problem = env.problem
        self._validation = (problem.sample_initial_states(rng, VALIDATION_EPISODES),
                            sample_references(problem, rng, VALIDATION_EPISODES, config.reference_std))
        self.validation_cost = self._validate(self.policy)
        self.history: List[float] = [self.validation_cost]

    @property
    def pending(self) -> int:
        return len(self._episodes)

    @property
    def required_episodes(self) -> int:
        """Episodes per fit: sample_factor times the quadratic features at t = 0, per sample row."""
        p = self.env.problem
        m = p.d_x + min(self.env.window, p.T) * p.d_z + p.d_u
        rows_per_episode = 1 if self.config.time_varying else p.T
        return math.ceil(self.config.sample_factor * m * (m + 1) / 2 / rows_per_episode)

    def record(self, episode: Episode) -> None:
        self._episodes.append(episode)

    def update(self) -> bool:
        """Fit on the pending episodes once there are enough; True when a new policy was adopted."""
        if len(self._episodes) < self.required_episodes:
            return False
        states = np.concatenate([e.states for e in self._episodes], axis=2)
        actions = np.concatenate([e.actions for e in self._episodes], axis=2)
        costs = np.concatenate([e.costs for e in self._episodes], axis=1)
        self._episodes = []
        if self.config.time_varying:
            adopted = self._consider(self._backward_fit(states, actions, costs))
        else:
            adopted = False
            for _ in range(self.config.sweeps):
                if not self._consider(self._residual_fit(states, actions, costs)):
                    break
                adopted = True
        self.history.append(self.validation_cost)
        return adopted

    def _validate(self, policy: TrackingPolicy) -> float:
        X, R = self._validation
        with np.errstate(over="ignore", invalid="ignore"):
            cost = float(np.mean(rollout_policy(self.env, policy, X, R).total_cost))
        return cost if math.isfinite(cost) else math.inf

    def _consider(self, candidate: Optional[Tuple[TrackingPolicy, QuadraticCritic]]) -> bool:
        if candidate is None:
            logger.warning("Critic fit failed; keeping the current tracking policy")
            return False
        policy, critic = candidate
        cost = self._validate(policy)
        if cost > self.validation_cost + ADOPT_TOL * max(1.0, abs(self.validation_cost)):
            logger.warning("Fitted policy raises the validation cost from %.6g to %.6g; keeping the current one",
                           self.validation_cost, cost)
            return False
        self.policy, self.critic, self.validation_cost = policy, critic, cost
        return True

    def _fit_critic(self, Z: np.ndarray, target: np.ndarray,
                    Z_next: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
        """Symmetric M with z^T M z = target, or z^T M z - z'^T M z' = target when Z_next is given."""
        Phi = _quadratic_features(Z)
        if Z_next is not None:
            Phi = Phi - _quadratic_features(Z_next)
        w, ridge, ok = _regularized_fit(Phi, target, self.config.ridge)
        if ridge > self.config.ridge:
            self.rank_deficient = True
            logger.warning("Critic regression is rank-deficient; ridge raised to %.3g", ridge)
        self.ridge = max(self.ridge, ridge)
        if not ok:
            return None
        n_s = self.env.n_s
        M = _unpack_symmetric(w, self.env.n_z)
        if not np.all(np.isfinite(M)) or np.linalg.eigvalsh(M[n_s:, n_s:]).min() <= 0:
            return None
        return M

    def _backward_fit(self, states, actions, costs) -> Optional[Tuple[TrackingPolicy, QuadraticCritic]]:
        """Fitted Q backwards in time; off-policy, so one pass gives the greedy policy."""
        T, n_s = actions.shape[0], self.env.n_s
        gains = np.empty((T, actions.shape[1], n_s))
        matrices = np.empty((T, self.env.n_z, self.env.n_z))
        W_next = np.zeros((n_s, n_s))
        for t in reversed(range(T)):
            target = costs[t] + np.einsum("ib,ij,jb->b", states[t + 1], W_next, states[t + 1])
            M = self._fit_critic(np.vstack([states[t], actions[t]]), target)
            if M is None:
                return None
            K = _greedy_gain(M, n_s)
            lift = np.vstack([np.eye(n_s), K])
            W_next = lift.T @ M @ lift
            W_next = 0.5 * (W_next + W_next.T)
            gains[t], matrices[t] = K, M
        return TrackingPolicy(gains, time_varying=True), QuadraticCritic(matrices, n_s, time_varying=True)

    def _residual_fit(self, states, actions, costs) -> Optional[Tuple[TrackingPolicy, QuadraticCritic]]:
        """Stationary critic of the current gain by Bellman-residual least squares."""
        T, n_s = actions.shape[0], self.env.n_s
        K = self.policy.gain(0)
        Z = np.concatenate([np.vstack([states[t], actions[t]]) for t in range(T)], axis=1)
        successors = []
        for t in range(T):
            if t + 1 < T:
                s_next = states[t + 1]
                successors.append(np.vstack([s_next, K @ s_next]))
            else:
                successors.append(np.zeros((self.env.n_z, states.shape[2])))
        M = self._fit_critic(Z, costs.reshape(-1), np.concatenate(successors, axis=1))
        if M is None:
            return None
        return (TrackingPolicy(_greedy_gain(M, n_s)[None], time_varying=False),
                QuadraticCritic(M[None], n_s, time_varying=False))


@dataclass(frozen=True, eq=False)
class TrackingResult:
    policy: TrackingPolicy
    critic: Optional[QuadraticCritic]
    rank_deficient: bool
    ridge: float
    validation_costs: List[float]


def sample_references(problem: LayeredProblem, rng: np.random.Generator, count: int, scale: float) -> np.ndarray:
    return scale * rng.standard_normal((count, problem.n_ref)).T


def train_tracking(env: AugmentedEnv, episodes: int, seed: int,
                   config: Optional[TrackingConfig] = None) -> TrackingResult:
    """LSPI on episodes with Gaussian initial states and references, split over the configured rounds."""
    if episodes < 1:
        raise InvalidArgumentError(f"episodes must be >= 1, got {episodes}")
    config = TrackingConfig() if config is None else config
    problem = env.problem
    rng = np.random.default_rng(seed)
    learner = TrackingLearner(env, config, rng=np.random.default_rng([seed, 1]))

    rounds = min(config.iterations, episodes)
    counts = [episodes // rounds + (1 if i < episodes % rounds else 0) for i in range(rounds)]
    for i, count in enumerate(counts):
        X = problem.sample_initial_states(rng, count)
        R = sample_references(problem, rng, count, config.reference_std)
        learner.record(rollout_policy(env, learner.policy, X, R, rng=rng, noise_std=config.explore_std))
        learner.update()
        logger.debug("tracking round %d/%d done on %d episodes, validation cost %.6g", i + 1, rounds, count,
                     learner.validation_cost)
    if learner.critic is None:
        logger.warning("No critic was fitted: %d episodes, a fit needs %d", episodes, learner.required_episodes)
    return TrackingResult(policy=learner.policy, critic=learner.critic, rank_deficient=learner.rank_deficient,
                          ridge=learner.ridge, validation_costs=list(learner.history))


def oracle_tracking_policy(env: AugmentedEnv) -> Tuple[TrackingPolicy, QuadraticCritic]:
    """Exact time-varying policy and Q-function of the augmented problem (backward Riccati)."""
    T, n_s = env.problem.T, env.n_s
    A_aug, B_aug = env.transition
    dynamics = np.hstack([A_aug, B_aug])
    gains = np.empty((T, env.problem.d_u, n_s))
    matrices = np.empty((T, env.n_z, env.n_z))
    V = np.zeros((n_s, n_s))
    for t in reversed(range(T)):
        M = env.stage_cost + dynamics.T @ V @ dynamics
        M = 0.5 * (M + M.T)
        K = -np.linalg.solve(M[n_s:, n_s:], M[n_s:, :n_s])
        V = M[:n_s, :n_s] + M[:n_s, n_s:] @ K
        V = 0.5 * (V + V.T)
        gains[t], matrices[t] = K, M
    return TrackingPolicy(gains, time_varying=True), QuadraticCritic(matrices, n_s, time_varying=True)


@dataclass(frozen=True, eq=False)
class PolicyMaps:
    """Stacked open-loop maps of a linear policy: u = U_r r~ + U_xi xi."""

    U_r: np.ndarray
    U_xi: np.ndarray


def linearize_policy(env: AugmentedEnv, policy: TrackingPolicy) -> PolicyMaps:
    p = env.problem
    basis_x = np.hstack([np.eye(p.d_x), np.zeros((p.d_x, p.n_ref))])
    basis_r = np.hstack([np.zeros((p.n_ref, p.d_x)), np.eye(p.n_ref)])
    U = rollout_policy(env, policy, basis_x, basis_r).u
    return PolicyMaps(U_r=U[:, p.d_x:], U_xi=U[:, :p.d_x])


def value_quadratic(env: AugmentedEnv, policy: TrackingPolicy, critic: QuadraticCritic) -> ValueQuadratic:
    """The critic's tracking value as a quadratic in (r~, xi), including the t = 0 penalty."""
    p = env.problem
    if env.window < p.T:
        raise ConfigurationError(f"value over the whole reference needs window >= T ({p.T}), got {env.window}")
    basis_x = np.hstack([np.eye(p.d_x), np.zeros((p.d_x, p.n_ref))])
    basis_r = np.hstack([np.zeros((p.n_ref, p.d_x)), np.eye(p.n_ref)])
    lift = env.initial_state(basis_x, basis_r)
    Pi_x, Pi_r = lift[:, :p.d_x], lift[:, p.d_x:]
    W = critic.value_matrix(0, policy)

    half_rho = 0.5 * p.rho
    first = np.zeros((p.d_z, p.n_ref))
    first[:, :p.d_z] = np.eye(p.d_z)
    C = p.output.C
    return ValueQuadratic(
        W_rr=Pi_r.T @ W @ Pi_r + half_rho * first.T @ first,
        W_rx=Pi_r.T @ W @ Pi_x - half_rho * first.T @ C,
        W_xx=Pi_x.T @ W @ Pi_x + half_rho * C.T @ C,
    )


def zero_policy_value(oracle: TrackingOracle) -> ValueQuadratic:
    """Value of applying no input: (rho/2)||r~ - F_z xi||^2."""
    half_rho = 0.5 * oracle.rho
    n = oracle.problem.n_ref
    return ValueQuadratic(W_rr=half_rho * np.eye(n), W_rx=-half_rho * oracle.Fz,
                          W_xx=half_rho * oracle.Fz.T @ oracle.Fz)


@dataclass(frozen=True, eq=False)
class EffectivePerturbation:
    spec: PerturbationSpec
    value: ValueQuadratic
    fit_residual: float
    flagged: bool

    @property
    def eps_P(self) -> float:
        """||Delta_P||, plus the residual-form misfit when the learned value is flagged."""
        return self.spec.eps_P + (self.fit_residual if self.flagged else 0.0)


def effective_perturbations(oracle: TrackingOracle, env: AugmentedEnv, policy: TrackingPolicy,
                            critic: QuadraticCritic) -> EffectivePerturbation:
    """Delta_ur, Delta_uxi, Delta_P of a learned policy/critic relative to the exact tracker."""
    maps = linearize_policy(env, policy)
    Delta_ur = maps.U_r - oracle.tracking_gain
    Delta_uxi = maps.U_xi + oracle.tracking_gain @ oracle.Fz
    value = value_quadratic(env, policy, critic)
    Delta_P = value.W_rr - oracle.P

    # residual form requires W_rx = -W_rr F_z and W_xx = F_z^T W_rr F_z
    Fz = oracle.Fz
    fit_residual = float(np.linalg.norm(value.W_rx + value.W_rr @ Fz, 2)
                         + np.linalg.norm(value.W_xx - Fz.T @ value.W_rr @ Fz, 2))
    flagged = fit_residual > RESIDUAL_FORM_TOL * max(1.0, float(np.linalg.norm(value.W_rr, 2)))
    if flagged:
        logger.warning("Learned value is not in residual form (misfit %.3g); eps_P includes the misfit", fit_residual)
    spec = PerturbationSpec(Delta_P=Delta_P, Delta_ur=Delta_ur, Delta_uxi=Delta_uxi)
    return EffectivePerturbation(spec=spec, value=value, fit_residual=fit_residual, flagged=flagged)
