"""Lagrangian solver for the discounted constrained MDP.

The rate constraints are priced into the reward with nonnegative multipliers;
value iteration solves the priced MDP for a fixed price vector and a projected
subgradient step with diminishing step size ``1/j`` moves the prices toward the
constraint boundary.  Transitions are normally action independent (the channel
does not react to transmit power); a ``(S, A, S)`` transition array is also
accepted so that small synthetic instances can exercise the general case.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConvergenceError, DomainError, InfeasibleError
from .fsmc import stationary_distribution

log = logging.getLogger(__name__)

InitialState = Union[int, str]
STEADY = "steady"


@dataclass(frozen=True)
class DiscountedMdp:
    transition: np.ndarray     # (S, S), or (S, A, S) for action-dependent test instances
    reward: np.ndarray         # (S, A)
    costs: np.ndarray          # (C, S, A)
    discount: float

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        c = np.asarray(self.costs, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if c.size == 0:
            c = np.zeros((0,) + r.shape)
        s, a = r.shape
        if p.shape not in ((s, s), (s, a, s)):
            raise DomainError(f"transition shape {p.shape} does not fit reward shape {r.shape}")
        if c.shape[1:] != r.shape:
            raise DomainError(f"cost shape {c.shape} does not fit reward shape {r.shape}")
        if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-10, rtol=0) or np.any(p < 0):
            raise DomainError("transition rows must be probability vectors")
        if not 0 < self.discount < 1:
            raise DomainError(f"discount must lie in (0, 1), got {self.discount}")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "costs", c)

    @property
    def num_states(self) -> int:
        return self.reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def num_constraints(self) -> int:
        return self.costs.shape[0]

    @property
    def action_independent(self) -> bool:
        return self.transition.ndim == 2

    def policy_transition(self, actions: np.ndarray) -> np.ndarray:
        if self.action_independent:
            return self.transition
        return self.transition[np.arange(self.num_states), actions]

    def stationary(self) -> np.ndarray:
        if not self.action_independent:
            raise DomainError("steady-state weighting needs action-independent transitions")
        return stationary_distribution(self.transition)


@dataclass(frozen=True)
class Policy:
    action_of_state: np.ndarray
    value: np.ndarray
    cost_values: np.ndarray    # (C, S)

    @property
    def num_states(self) -> int:
        return self.action_of_state.size


@dataclass(frozen=True)
class LagrangeMultipliers:
    rho: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if np.any(rho < 0):
            raise DomainError("Lagrange multipliers must be nonnegative")
        object.__setattr__(self, "rho", rho)


@dataclass(frozen=True)
class SolveSettings:
    epsilon: float = 1e-4
    rho_init: float = 10.0
    max_inner_iters: int = 100_000
    max_outer_iters: int = 5_000
    r_min: float = 0.0
    initial_state: InitialState = 0
    normalize_by_horizon: bool = False
    warm_start: bool = True
    rho_ceiling: float = 1e6
    feasibility_tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not self.rho_init > 0:
            raise DomainError("rho_init must be positive")
        if self.max_inner_iters < 1 or self.max_outer_iters < 1:
            raise DomainError("iteration bounds must be positive")
        if not (self.initial_state == STEADY or isinstance(self.initial_state, (int, np.integer))):
            raise DomainError(f"initial_state must be an index or {STEADY!r}")


@dataclass
class ViResult:
    value: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float


@dataclass
class SolveReport:
    rho: np.ndarray
    outer_iterations: int
    inner_iterations: int
    total_inner_iterations: int
    residual: float
    value: float
    costs: np.ndarray
    slacks: np.ndarray
    converged: bool
    feasible: bool
    wall_time: float
    rho_trace: list = field(default_factory=list, repr=False)

    def as_text(self, include_time: bool = True) -> str:
        """``key = value`` lines, one field per line."""
        def vec(x):
            return ", ".join(f"{v:.12g}" for v in np.atleast_1d(x))
        lines = [
            f"converged = {str(self.converged).lower()}",
            f"feasible = {str(self.feasible).lower()}",
            f"outer_iterations = {self.outer_iterations}",
            f"inner_iterations = {self.inner_iterations}",
            f"total_inner_iterations = {self.total_inner_iterations}",
            f"bellman_residual = {self.residual:.6e}",
            f"rho = {vec(self.rho)}",
            f"value = {self.value:.12g}",
            f"constraint_values = {vec(self.costs)}",
            f"slacks = {vec(self.slacks)}",
        ]
        if include_time:
            lines.append(f"wall_time_s = {self.wall_time:.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class SolveResult:
    policy: Policy
    multipliers: LagrangeMultipliers
    report: SolveReport


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def lagrangian_table(mdp: DiscountedMdp, multipliers: LagrangeMultipliers | np.ndarray) -> np.ndarray:
    """Reward plus multiplier-weighted costs, ``R + sum_u rho_u C_u``."""
    rho = multipliers.rho if isinstance(multipliers, LagrangeMultipliers) else np.asarray(multipliers, float)
    if np.any(rho < 0):
        raise DomainError("Lagrange multipliers must be nonnegative")
    if rho.shape != (mdp.num_constraints,):
        raise DomainError(f"expected {mdp.num_constraints} multipliers, got shape {rho.shape}")
    table = mdp.reward.copy()
    for r, c in zip(rho, mdp.costs):
        if r != 0:
            table += r * c
    return table


def value_iteration(table: np.ndarray, mdp: DiscountedMdp, settings: SolveSettings,
                    v0: np.ndarray | None = None) -> ViResult:
    """Iterate the Bellman operator until ``||v' - v|| < eps (1 - lam) / lam``.

    Starts from zero unless ``v0`` is given.  Greedy actions are taken with
    lowest-index tie-breaking; with action-independent transitions the
    continuation term is a per-state constant, so they are the row argmax of
    ``table`` itself.
    """
    lam = mdp.discount
    threshold = settings.epsilon * (1 - lam) / lam
    v = np.zeros(mdp.num_states) if v0 is None else np.array(v0, dtype=float)
    trace = []
    sup = np.maximum.reduce
    if mdp.action_independent:
        best = table.max(axis=1)
        lam_p = lam * mdp.transition
        for it in range(1, settings.max_inner_iters + 1):
            v_new = lam_p.dot(v)
            v_new += best
            residual = float(sup(np.abs(v_new - v)))
            trace.append(residual)
            v = v_new
            if residual < threshold:
                return ViResult(v, np.argmax(table, axis=1), it, residual)
    else:
        for it in range(1, settings.max_inner_iters + 1):
            q = table + lam * (mdp.transition @ v)
            v_new = q.max(axis=1)
            residual = float(sup(np.abs(v_new - v)))
            trace.append(residual)
            v = v_new
            if residual < threshold:
                q = table + lam * (mdp.transition @ v)
                return ViResult(v, np.argmax(q, axis=1), it, residual)
    raise ConvergenceError(
        f"value iteration did not reach residual {threshold:.3g} in "
        f"{settings.max_inner_iters} sweeps (last residual {trace[-1]:.3g})", trace)


def _policy_rewards(table: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return table[np.arange(table.shape[0]), actions]


def policy_evaluation(actions: np.ndarray, table: np.ndarray, mdp: DiscountedMdp,
                      method: str = "direct") -> np.ndarray:
    """Discounted value of a deterministic policy on ``table``.

    ``direct`` solves ``(I - lam P_pi) v = r_pi``; ``iterative`` applies the
    policy's Bellman operator until the sup-norm update falls below
    ``1e-12 * max(1, ||v||)``.
    """
    actions = np.asarray(actions)
    if actions.shape != (mdp.num_states,):
        raise DomainError(f"policy must assign one action to each of {mdp.num_states} states")
    if np.any((actions < 0) | (actions >= mdp.num_actions)):
        raise DomainError("policy action index out of range")
    r = _policy_rewards(table, actions)
    p = mdp.policy_transition(actions)
    lam = mdp.discount
    if method == "direct":
        return np.linalg.solve(np.eye(mdp.num_states) - lam * p, r)
    if method == "iterative":
        v = np.zeros_like(r)
        for _ in range(1_000_000):
            v_new = r + lam * (p @ v)
            delta = np.max(np.abs(v_new - v))
            v = v_new
            if delta <= 1e-12 * max(1.0, float(np.max(np.abs(v)))):
                return v
        raise ConvergenceError("iterative policy evaluation did not converge")
    raise DomainError(f"unknown evaluation method {method!r}")


def read_initial(values: np.ndarray, mdp: DiscountedMdp, initial_state: InitialState,
                 weights: np.ndarray | None = None) -> float:
    """Value at the designated initial state, or its steady-state average."""
    if initial_state == STEADY:
        w = mdp.stationary() if weights is None else weights
        return float(w @ values)
    if not 0 <= initial_state < mdp.num_states:
        raise DomainError(f"initial state {initial_state} outside [0, {mdp.num_states})")
    return float(values[initial_state])


def constraint_cost(policy: Policy | np.ndarray, mdp: DiscountedMdp, index: int,
                    settings: SolveSettings) -> float:
    """Expected discounted total rate of constraint ``index`` from the initial state."""
    if not 0 <= index < mdp.num_constraints:
        raise DomainError(f"constraint index {index} outside [0, {mdp.num_constraints})")
    actions = policy.action_of_state if isinstance(policy, Policy) else np.asarray(policy)
    values = policy_evaluation(actions, mdp.costs[index], mdp)
    return read_initial(values, mdp, settings.initial_state)


def multiplier_update(multipliers: LagrangeMultipliers, costs: np.ndarray, r_min: float,
                      step_index: int) -> LagrangeMultipliers:
    """Projected subgradient step ``max(0, rho + (r_min - c) / j)``."""
    if step_index < 1:
        raise DomainError("multiplier steps are 1-indexed")
    rho = np.maximum(0.0, multipliers.rho + (r_min - np.asarray(costs, float)) / step_index)
    return LagrangeMultipliers(rho, step_index)


def evaluate_policy(actions: np.ndarray, mdp: DiscountedMdp) -> Policy:
    """Attach exact reward and cost values to a deterministic decision rule."""
    actions = np.asarray(actions, dtype=np.int64)
    value = policy_evaluation(actions, mdp.reward, mdp)
    costs = np.array([policy_evaluation(actions, c, mdp) for c in mdp.costs]).reshape(
        mdp.num_constraints, mdp.num_states)
    return Policy(actions, value, costs)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

def _compared_costs(policy: Policy, mdp: DiscountedMdp, settings: SolveSettings,
                    weights) -> np.ndarray:
    raw = np.array([read_initial(c, mdp, settings.initial_state, weights) for c in policy.cost_values])
    return (1 - mdp.discount) * raw if settings.normalize_by_horizon else raw


def max_achievable_costs(mdp: DiscountedMdp, settings: SolveSettings, weights=None) -> np.ndarray:
    """Per-constraint best discounted rate over all policies (ignoring the reward)."""
    out = []
    for c in mdp.costs:
        vi = value_iteration(c, mdp, settings)
        value = policy_evaluation(vi.policy, c, mdp)
        out.append(read_initial(value, mdp, settings.initial_state, weights))
    out = np.array(out)
    return (1 - mdp.discount) * out if settings.normalize_by_horizon else out


def solve_cmdp(mdp: DiscountedMdp, settings: SolveSettings) -> SolveResult:
    """Lagrangian value iteration with an outer multiplier loop.

    Raises ``InfeasibleError`` when some constraint cannot reach ``r_min`` under
    any policy or the multipliers blow past ``settings.rho_ceiling``.  When the
    outer loop runs out of iterations the best iterate (feasible with the
    largest value, else the least violating one) is returned with
    ``report.converged`` false.
    """
    start = time.perf_counter()
    weights = mdp.stationary() if settings.initial_state == STEADY else None
    tol = settings.feasibility_tol
    if mdp.num_constraints and settings.r_min > 0:
        best_possible = max_achievable_costs(mdp, settings, weights)
        short = np.flatnonzero(best_possible < settings.r_min - tol)
        if short.size:
            raise InfeasibleError(
                f"constraints {short.tolist()} cannot reach r_min={settings.r_min:g}; best "
                f"achievable {best_possible[short].round(6).tolist()}")

    rho = LagrangeMultipliers(np.full(mdp.num_constraints, settings.rho_init), 0)
    v = None
    total_inner = 0
    trace = [rho.rho.copy()]
    best = None
    converged = False
    rho_star = rho
    evaluated = {}      # the multipliers typically cycle among a few policies
    for j in range(1, settings.max_outer_iters + 1):
        vi = value_iteration(lagrangian_table(mdp, rho), mdp, settings,
                             v if settings.warm_start else None)
        total_inner += vi.iterations
        v = vi.value
        key = vi.policy.tobytes()
        if key not in evaluated:
            evaluated[key] = evaluate_policy(vi.policy, mdp)
        policy = evaluated[key]
        costs = _compared_costs(policy, mdp, settings, weights)
        slack = costs - settings.r_min
        objective = read_initial(policy.value, mdp, settings.initial_state, weights)
        key = (bool(np.all(slack >= -tol)), objective if np.all(slack >= -tol) else float(slack.min(initial=0)))
        if best is None or key > best[0]:
            best = (key, rho)
        nxt = multiplier_update(rho, costs, settings.r_min, j)
        trace.append(nxt.rho.copy())
        if np.linalg.norm(nxt.rho - rho.rho) < settings.epsilon:
            rho_star = LagrangeMultipliers(rho.rho, j)
            converged = True
            break
        if np.any(nxt.rho > settings.rho_ceiling):
            raise InfeasibleError(
                f"multipliers exceeded {settings.rho_ceiling:g} after {j} updates "
                f"(slacks {slack.round(6).tolist()}); the rate constraints look infeasible")
        rho = nxt
    else:
        rho_star = LagrangeMultipliers(best[1].rho, settings.max_outer_iters)
        log.warning("multiplier iteration hit %d steps without converging", settings.max_outer_iters)

    # Final policy at the converged prices.
    vi = value_iteration(lagrangian_table(mdp, rho_star), mdp, settings,
                         v if settings.warm_start else None)
    total_inner += vi.iterations
    policy = evaluate_policy(vi.policy, mdp)
    costs = _compared_costs(policy, mdp, settings, weights)
    slack = costs - settings.r_min
    report = SolveReport(
        rho=rho_star.rho, outer_iterations=rho_star.iteration, inner_iterations=vi.iterations,
        total_inner_iterations=total_inner, residual=vi.residual,
        value=read_initial(policy.value, mdp, settings.initial_state, weights),
        costs=costs, slacks=slack, converged=converged,
        feasible=bool(np.all(slack >= -tol)), wall_time=time.perf_counter() - start,
        rho_trace=trace)
    return SolveResult(policy, rho_star, report)


def horizon_for(discount: float, tail: float = 1e-8) -> int:
    """Smallest n with ``discount**n < tail``."""
    return int(math.floor(math.log(tail) / math.log(discount))) + 1
