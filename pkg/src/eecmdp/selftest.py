"""Quick oracle checks runnable from an installed package (``eecmdp selftest``)."""
from __future__ import annotations

import numpy as np

from .baseline import enumerate_optimal_policy, greedy_ergodic_policy
from .fsmc import equiprobable_thresholds, link_transition_matrix, max_admissible_doppler, \
    stationary_distribution
from .harness import Scenario, run_solve
from .solver import DiscountedMdp, SolveSettings, policy_evaluation, value_iteration


def random_mdp(rng, num_states, num_actions, discount=0.9, constraints=1):
    p = rng.random((num_states, num_states))
    p /= p.sum(axis=1, keepdims=True)
    return DiscountedMdp(p, rng.random((num_states, num_actions)),
                         rng.random((constraints, num_states, num_actions)), discount)


def check_fsmc(rng) -> bool:
    for _ in range(50):
        q = equiprobable_thresholds(rng.uniform(0.1, 10), int(rng.integers(2, 7)))
        m = link_transition_matrix(q, rng.uniform(0.01, 0.99) * max_admissible_doppler(q))
        if not np.allclose(m.probs.sum(axis=1), 1, atol=1e-12, rtol=0):
            return False
        if not np.allclose(stationary_distribution(m.probs), q.steady, atol=1e-10, rtol=0):
            return False
    return True


def check_value_iteration(rng) -> bool:
    settings = SolveSettings(epsilon=1e-4)
    for _ in range(20):
        mdp = random_mdp(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)))
        vi = value_iteration(mdp.reward, mdp, settings)
        _, best = enumerate_optimal_policy(mdp, initial_state=0)
        if abs(policy_evaluation(vi.policy, mdp.reward, mdp)[0] - best) > settings.epsilon:
            return False
    return True


def check_policy_evaluation(rng) -> bool:
    mdp = random_mdp(rng, 8, 3)
    actions = rng.integers(0, 3, 8)
    direct = policy_evaluation(actions, mdp.reward, mdp, "direct")
    iterative = policy_evaluation(actions, mdp.reward, mdp, "iterative")
    return bool(np.max(np.abs(direct - iterative)) < 1e-9)


def check_default_reduction() -> bool:
    outcome = run_solve(Scenario())
    greedy = greedy_ergodic_policy(outcome.system.mdp)
    same = np.array_equal(outcome.result.policy.action_of_state, greedy.action_of_state)
    gap = np.max(np.abs(outcome.result.policy.value - greedy.value))
    return bool(same and gap <= Scenario().epsilon)


def run_all(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    checks = [
        ("fsmc rows and stationarity", lambda: check_fsmc(rng)),
        ("value iteration vs enumeration", lambda: check_value_iteration(rng)),
        ("direct vs iterative evaluation", lambda: check_policy_evaluation(rng)),
        ("unconstrained reduction to greedy", check_default_reduction),
    ]
    ok = True
    for name, fn in checks:
        passed = fn()
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
