"""Energy-efficient uplink power allocation for multi-cell massive MIMO as a constrained MDP."""
from .baseline import (BaselineSpec, compare_policies, enumerate_optimal_policy,
                       greedy_ergodic_policy)
from .fsmc import (FsmcModel, LinkQuantizer, StateCodec, build_fsmc, equiprobable_thresholds,
                   link_transition_matrix)
from .harness import Scenario, SweepSpec, load_scenario, run_solve, run_sweep
from .phy import PowerGrid, RewardTables, build_reward_tables
from .solver import (DiscountedMdp, LagrangeMultipliers, Policy, SolveSettings, solve_cmdp,
                     value_iteration)

__version__ = "0.1.0"
