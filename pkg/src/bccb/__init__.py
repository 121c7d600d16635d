"""Budget-constrained causal bandits: online treatment allocation under a budget, with replay evaluation."""

__version__ = "0.1.0"

from .domain import BetaPosterior, BudgetState, Dataset, Decision, Observation, Reason, make_rng
from .hte_online import HteConfig, LinearLogisticScorer, TwoModelHte
from .policies import (
    POLICY_NAMES,
    BccbPolicy,
    BudgetedThompsonPolicy,
    FitFailure,
    HteGreedyPolicy,
    OfflineUpliftPolicy,
    PolicyConfig,
    PolicyContext,
    ThompsonPolicy,
    make_policy,
    offline_uplift_fit,
)
from .replay import RunMetrics, run_replay

__all__ = [
    "BetaPosterior",
    "BudgetState",
    "Dataset",
    "Decision",
    "Observation",
    "Reason",
    "make_rng",
    "HteConfig",
    "LinearLogisticScorer",
    "TwoModelHte",
    "POLICY_NAMES",
    "BccbPolicy",
    "BudgetedThompsonPolicy",
    "FitFailure",
    "HteGreedyPolicy",
    "OfflineUpliftPolicy",
    "PolicyConfig",
    "PolicyContext",
    "ThompsonPolicy",
    "make_policy",
    "offline_uplift_fit",
    "RunMetrics",
    "run_replay",
]
