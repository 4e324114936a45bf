"""Comparison baseline and brute-force oracles.

The ergodic baseline picks, in every state, the feasible action with the
largest immediate reward.  ``enumerate_optimal_policy`` and
``rollout_discounted`` are independent checks of the solver: the first tries
every deterministic stationary policy, the second simulates the chain.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InfeasibleError
from .solver import STEADY, DiscountedMdp, InitialState, Policy, evaluate_policy, read_initial


@dataclass(frozen=True)
class BaselineSpec:
    feasibility_rule: str = "none"      # or "per_slot_rate"
    r_inst: float = 0.0

    def __post_init__(self):
        if self.feasibility_rule not in ("none", "per_slot_rate"):
            raise DomainError(f"unknown feasibility rule {self.feasibility_rule!r}")
        if self.r_inst < 0:
            raise DomainError("r_inst must be nonnegative")


def greedy_ergodic_policy(mdp: DiscountedMdp, spec: BaselineSpec = BaselineSpec()) -> Policy:
    """Per-state exhaustive search for the reward-maximizing feasible action."""
    reward = mdp.reward
    if spec.feasibility_rule == "per_slot_rate" and mdp.num_constraints:
        feasible = np.all(mdp.costs >= spec.r_inst, axis=0)
        empty = np.flatnonzero(~feasible.any(axis=1))
        if empty.size:
            raise InfeasibleError(f"no action reaches the per-slot rate {spec.r_inst:g} "
                                  f"in states {empty.tolist()}")
        reward = np.where(feasible, reward, -np.inf)
    return evaluate_policy(np.argmax(reward, axis=1), mdp)


def _batched_values(mdp: DiscountedMdp, policies: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Exact values ``(N, S)`` of a batch ``(N, S)`` of deterministic policies."""
    n, s = policies.shape
    rows = np.arange(s)
    r = table[rows, policies]
    if mdp.action_independent:
        p = np.broadcast_to(mdp.transition, (n, s, s))
    else:
        p = mdp.transition[rows, policies]
    a = np.eye(s) - mdp.discount * p
    return np.linalg.solve(a, r[..., None])[..., 0]


def enumerate_optimal_policy(mdp: DiscountedMdp, r_min: float = 0.0,
                             initial_state: InitialState = 0, limit: int = 10 ** 6,
                             tol: float = 1e-9, chunk: int = 4096) -> tuple[Policy, float]:
    """Best deterministic stationary policy by exhaustive search.

    Maximizes the value at ``initial_state`` subject to every constraint value
    there being at least ``r_min``; ties go to the lexicographically smallest
    policy.
    """
    s, a = mdp.num_states, mdp.num_actions
    count = a ** s
    if count > limit:
        raise DomainError(f"{a}^{s} = {count} policies exceeds the enumeration limit {limit}")
    weights = mdp.stationary() if initial_state == STEADY else None
    best_value, best_policy = -np.inf, None
    it = itertools.product(range(a), repeat=s)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        values = _batched_values(mdp, block, mdp.reward)
        ok = np.ones(block.shape[0], dtype=bool)
        for c in mdp.costs:
            cv = _batched_values(mdp, block, c)
            at0 = cv @ weights if weights is not None else cv[:, initial_state]
            ok &= at0 >= r_min - tol
        v0 = values @ weights if weights is not None else values[:, initial_state]
        v0 = np.where(ok, v0, -np.inf)
        j = int(np.argmax(v0))
        if v0[j] > best_value:
            best_value, best_policy = float(v0[j]), block[j]
    if best_policy is None:
        raise InfeasibleError(f"no deterministic policy reaches r_min={r_min:g}")
    return evaluate_policy(best_policy, mdp), best_value


@dataclass(frozen=True)
class PolicyComparison:
    value_a: float
    value_b: float
    value_difference: float     # value_a - value_b at the initial state
    agreement: float            # fraction of states with the same action
    slacks_a: np.ndarray
    slacks_b: np.ndarray


def compare_policies(a: Policy, b: Policy, mdp: DiscountedMdp, initial_state: InitialState = 0,
                     r_min: float = 0.0) -> PolicyComparison:
    if a.num_states != mdp.num_states or b.num_states != mdp.num_states:
        raise DomainError("policies do not match the MDP")
    va = read_initial(a.value, mdp, initial_state)
    vb = read_initial(b.value, mdp, initial_state)
    sa = np.array([read_initial(c, mdp, initial_state) for c in a.cost_values]) - r_min
    sb = np.array([read_initial(c, mdp, initial_state) for c in b.cost_values]) - r_min
    agree = float(np.mean(a.action_of_state == b.action_of_state))
    return PolicyComparison(va, vb, va - vb, agree, sa, sb)


def rollout_discounted(mdp: DiscountedMdp, actions: np.ndarray, table: np.ndarray,
                       initial_state: int, episodes: int, horizon: int,
                       rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo estimate (mean, standard error) of a policy's discounted total.

    Runs ``episodes`` independent trajectories of ``horizon`` slots from
    ``initial_state``, collecting ``table[s, actions[s]]`` with discount.
    """
    actions = np.asarray(actions)
    per_state = table[np.arange(mdp.num_states), actions]
    if mdp.action_independent:
        cum = np.cumsum(mdp.transition, axis=1)
    else:
        cum = np.cumsum(mdp.transition[np.arange(mdp.num_states), actions], axis=1)
    cum[:, -1] = 1.0
    state = np.full(episodes, initial_state)
    total = np.zeros(episodes)
    weight = 1.0
    for _ in range(horizon):
        total += weight * per_state[state]
        weight *= mdp.discount
        u = rng.random(episodes)
        state = np.minimum((cum[state] <= u[:, None]).sum(axis=1), mdp.num_states - 1)
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(episodes))
