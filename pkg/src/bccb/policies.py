"""Sequential treatment policies: BCCB and its four baselines.

Every policy follows the same two-call protocol driven by the replay
harness: ``decide(ctx)`` returns a :class:`~bccb.domain.Decision` for the
current user, and ``observe(ctx, arm, outcome)`` is called only when that
decision was actually executed. Budget is owned by the harness and lives in
``ctx.budget``; ``observe`` charges it on treated rounds.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import BetaPosterior, BudgetState, Dataset, Decision, Observation, Reason, make_rng
from .hte_online import HteConfig, LinearLogisticScorer, TwoModelHte

POLICY_NAMES = ("bccb", "ts", "budgeted_ts", "hte_greedy", "offline_uplift")


@dataclass
class PolicyConfig:
    eta: float = 0.5
    lam: float = 0.001
    epsilon: float = 1e-6
    lambda_b: float = 0.0
    lambda_off: float = 0.001
    offline_epochs: int = 5
    pacing: bool = True
    hte: HteConfig = field(default_factory=HteConfig)

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.lam <= 0 or self.epsilon <= 0:
            raise ValueError("lambda and epsilon must be positive")
        if self.lambda_b < 0 or self.lambda_off < 0:
            raise ValueError("lambda_b and lambda_off must be non-negative")
        if self.offline_epochs < 1:
            raise ValueError("offline_epochs must be at least 1")


@dataclass
class PolicyContext:
    features: np.ndarray
    cost: float
    budget: BudgetState

    @property
    def round(self) -> int:
        return self.budget.round

    @property
    def horizon(self) -> int:
        return self.budget.horizon


def pace(budget: BudgetState) -> float:
    """Remaining-budget fraction divided by remaining-horizon fraction."""
    if budget.horizon <= 0 or not 0 <= budget.round < budget.horizon:
        raise ValueError(f"pace needs 0 <= round < horizon, got round={budget.round}, horizon={budget.horizon}")
    if budget.initial <= 0:
        return 0.0
    time_left = (budget.horizon - budget.round) / budget.horizon
    return (budget.remaining / budget.initial) / time_left


def paced_threshold(base: float, pace_value: float, epsilon: float) -> float:
    return base / max(pace_value, epsilon)


def exploration_bonus(treated: BetaPosterior, control: BetaPosterior, eta: float, rng: np.random.Generator) -> float:
    # Draw order is fixed (treated first) so runs replay exactly.
    theta_t = treated.sample(rng)
    theta_c = control.sample(rng)
    return (theta_t - theta_c) * eta


class Policy(ABC):
    name: str

    @abstractmethod
    def decide(self, ctx: PolicyContext) -> Decision:
        ...

    def observe(self, ctx: PolicyContext, arm: int, outcome: int) -> None:
        if arm == 1:
            ctx.budget.charge(ctx.cost)
        self._learn(ctx.features, arm, outcome)

    def _learn(self, features: np.ndarray, arm: int, outcome: int) -> None:
        pass

    def state_dict(self) -> dict:
        """Learned state only (not the rng), used for checkpoints and no-leak checks."""
        return {}


class _PosteriorMixin:
    treated_post: BetaPosterior
    control_post: BetaPosterior

    def _update_posteriors(self, arm: int, outcome: int) -> None:
        if arm == 1:
            self.treated_post = self.treated_post.update(outcome)
        else:
            self.control_post = self.control_post.update(outcome)

    def _posterior_state(self) -> dict:
        return {
            "treated_alpha": self.treated_post.alpha,
            "treated_beta": self.treated_post.beta,
            "control_alpha": self.control_post.alpha,
            "control_beta": self.control_post.beta,
        }


class BccbPolicy(_PosteriorMixin, Policy):
    """Online HTE estimate + Thompson exploration bonus, compared per dollar against a paced threshold."""

    name = "bccb"

    def __init__(self, dim: int, seed: int, config: PolicyConfig | None = None):
        self.config = config or PolicyConfig()
        self.rng = make_rng(seed)
        self.hte = TwoModelHte.create(dim, self.config.hte)
        self.treated_post = BetaPosterior()
        self.control_post = BetaPosterior()

    def decide(self, ctx: PolicyContext) -> Decision:
        cfg = self.config
        if ctx.cost > ctx.budget.remaining:
            return Decision.budget_exceeded()
        tau_hat = self.hte.predict_tau(ctx.features)
        bonus = exploration_bonus(self.treated_post, self.control_post, cfg.eta, self.rng)
        score = tau_hat + bonus
        value = score / ctx.cost
        p = pace(ctx.budget) if cfg.pacing else 1.0
        threshold = paced_threshold(cfg.lam, p, cfg.epsilon)
        treat = value > threshold
        return Decision(
            treat=int(treat),
            reason=Reason.TREATED if treat else Reason.BELOW_THRESHOLD,
            tau_hat=tau_hat,
            bonus=bonus,
            score=score,
            value_per_dollar=value,
            threshold=threshold,
            pace=p,
        )

    def _learn(self, features, arm, outcome):
        self.hte.observe(features, arm, outcome)
        self._update_posteriors(arm, outcome)

    def state_dict(self) -> dict:
        return {**self.hte.state_dict(), **self._posterior_state()}


class ThompsonPolicy(_PosteriorMixin, Policy):
    """Treat when the treated-rate sample beats the control-rate sample; ignores cost."""

    name = "ts"

    def __init__(self, dim: int, seed: int, config: PolicyConfig | None = None):
        self.config = config or PolicyConfig()
        self.rng = make_rng(seed)
        self.treated_post = BetaPosterior()
        self.control_post = BetaPosterior()

    def decide(self, ctx: PolicyContext) -> Decision:
        diff = self.treated_post.sample(self.rng) - self.control_post.sample(self.rng)
        treat = diff > 0.0
        return Decision(
            treat=int(treat),
            reason=Reason.TREATED if treat else Reason.BELOW_THRESHOLD,
            bonus=diff,
            score=diff,
            threshold=0.0,
        )

    def _learn(self, features, arm, outcome):
        self._update_posteriors(arm, outcome)

    def state_dict(self) -> dict:
        return self._posterior_state()


class BudgetedThompsonPolicy(ThompsonPolicy):
    """Thompson sampling with an affordability check and a pace-scaled margin on the sample difference."""

    name = "budgeted_ts"

    def decide(self, ctx: PolicyContext) -> Decision:
        cfg = self.config
        if ctx.cost > ctx.budget.remaining:
            return Decision.budget_exceeded()
        diff = self.treated_post.sample(self.rng) - self.control_post.sample(self.rng)
        p = pace(ctx.budget) if cfg.pacing else 1.0
        threshold = paced_threshold(cfg.lambda_b, p, cfg.epsilon)
        treat = diff > threshold
        return Decision(
            treat=int(treat),
            reason=Reason.TREATED if treat else Reason.BELOW_THRESHOLD,
            bonus=diff,
            score=diff,
            threshold=threshold,
            pace=p,
        )


class HteGreedyPolicy(Policy):
    name = "hte_greedy"

    def __init__(self, dim: int, seed: int, config: PolicyConfig | None = None):
        self.config = config or PolicyConfig()
        self.hte = TwoModelHte.create(dim, self.config.hte)

    def decide(self, ctx: PolicyContext) -> Decision:
        if ctx.cost > ctx.budget.remaining:
            return Decision.budget_exceeded()
        tau_hat = self.hte.predict_tau(ctx.features)
        treat = tau_hat > 0.0
        return Decision(
            treat=int(treat),
            reason=Reason.TREATED if treat else Reason.BELOW_THRESHOLD,
            tau_hat=tau_hat,
            score=tau_hat,
            value_per_dollar=tau_hat / ctx.cost,
            threshold=0.0,
        )

    def _learn(self, features, arm, outcome):
        self.hte.observe(features, arm, outcome)

    def state_dict(self) -> dict:
        return self.hte.state_dict()


class AlwaysTreatPolicy(Policy):
    """Treats every user. Only useful as a harness fixture."""

    name = "always"

    def __init__(self, dim: int = 0, seed: int = 0, config: PolicyConfig | None = None):
        pass

    def decide(self, ctx: PolicyContext) -> Decision:
        return Decision(treat=1, reason=Reason.ALWAYS_RULE)


# -- offline two-stage baseline ------------------------------------------------


@dataclass(frozen=True)
class FitFailure:
    reason: str


@dataclass
class OfflineUpliftModel:
    treated_model: LinearLogisticScorer
    control_model: LinearLogisticScorer
    mean: np.ndarray
    scale: np.ndarray

    def predict_tau(self, features: np.ndarray) -> float:
        z = (features - self.mean) / self.scale
        return self.treated_model.predict_prob(z) - self.control_model.predict_prob(z)


def _as_dataset(train: Dataset | Sequence[Observation]) -> Dataset:
    if isinstance(train, Dataset):
        return train
    return Dataset.from_observations(list(train))


def offline_uplift_fit(
    train: Dataset | Iterable[Observation],
    epochs: int = 5,
    config: HteConfig | None = None,
    seed: int = 0,
) -> OfflineUpliftModel | FitFailure:
    """Fit a two-model logistic uplift estimator on historical randomized data.

    Each arm's model is trained with ``epochs`` passes of shuffled SGD using
    the same step rule as the online learner, on features z-scored with the
    training-set statistics. Returns :class:`FitFailure` if the training set
    is empty or either arm lacks one of the outcome classes, since a logistic
    model cannot be fitted to a single class.
    """
    config = config or HteConfig()
    data = _as_dataset(train)
    if len(data) == 0:
        return FitFailure("empty training set")
    for arm, label in ((1, "treated"), (0, "control")):
        y = data.outcome[data.arm == arm]
        if y.size == 0:
            return FitFailure(f"no {label} examples")
        if not y.any():
            return FitFailure(f"{label} group has zero positive examples")
        if y.all():
            return FitFailure(f"{label} group has zero negative examples")

    mean = data.features.mean(axis=0)
    scale = np.sqrt(np.maximum(data.features.var(axis=0), config.var_floor))
    z_all = (data.features - mean) / scale
    rng = make_rng(seed)
    models = {}
    for arm in (1, 0):
        idx = np.flatnonzero(data.arm == arm)
        model = LinearLogisticScorer.zeros(data.dim, config.learning_rate, config.l2)
        z_arm, y_arm = z_all[idx], data.outcome[idx]
        for _ in range(epochs):
            for i in rng.permutation(idx.size):
                model.sgd_step(z_arm[i], int(y_arm[i]))
        models[arm] = model
    return OfflineUpliftModel(models[1], models[0], mean, scale)


class OfflineUpliftPolicy(Policy):
    """Pre-trained uplift scorer applied greedily with a per-dollar cut-off; never learns online."""

    name = "offline_uplift"

    def __init__(self, model: OfflineUpliftModel | FitFailure, config: PolicyConfig | None = None):
        self.config = config or PolicyConfig()
        self.model = model

    @property
    def failed(self) -> bool:
        return isinstance(self.model, FitFailure)

    def decide(self, ctx: PolicyContext) -> Decision:
        if ctx.cost > ctx.budget.remaining:
            return Decision.budget_exceeded()
        if self.failed:
            return Decision(treat=0, reason=Reason.BELOW_THRESHOLD, threshold=self.config.lambda_off)
        tau_hat = self.model.predict_tau(ctx.features)
        value = tau_hat / ctx.cost
        treat = value > self.config.lambda_off
        return Decision(
            treat=int(treat),
            reason=Reason.TREATED if treat else Reason.BELOW_THRESHOLD,
            tau_hat=tau_hat,
            score=tau_hat,
            value_per_dollar=value,
            threshold=self.config.lambda_off,
        )


def make_policy(
    name: str,
    dim: int,
    seed: int,
    config: PolicyConfig | None = None,
    offline_model: OfflineUpliftModel | FitFailure | None = None,
) -> Policy:
    """Build a fresh policy by name ("bccb", "ts", "budgeted_ts", "hte_greedy", "offline_uplift")."""
    config = config or PolicyConfig()
    if name == "bccb":
        return BccbPolicy(dim, seed, config)
    if name == "ts":
        return ThompsonPolicy(dim, seed, config)
    if name == "budgeted_ts":
        return BudgetedThompsonPolicy(dim, seed, config)
    if name == "hte_greedy":
        return HteGreedyPolicy(dim, seed, config)
    if name == "offline_uplift":
        if offline_model is None:
            raise ValueError("offline_uplift needs a fitted model (or FitFailure)")
        return OfflineUpliftPolicy(offline_model, config)
    raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
