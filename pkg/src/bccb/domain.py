"""Core value types shared by every policy and the replay harness."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_SEEDS = (42, 123, 456)


def make_rng(seed: int) -> np.random.Generator:
    """Return the PCG64 generator used for all randomness in the package."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class Observation:
    features: np.ndarray
    logged_arm: int
    outcome: int
    cost: float

    def __post_init__(self):
        if self.logged_arm not in (0, 1) or self.outcome not in (0, 1):
            raise ValueError("logged_arm and outcome must be 0 or 1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if not self.cost > 0:
            raise ValueError(f"cost must be positive, got {self.cost}")


@dataclass(frozen=True)
class BetaPosterior:
    """Beta posterior over a Bernoulli conversion rate, starting from Beta(1, 1)."""

    alpha: float = 1.0
    beta: float = 1.0

    def update(self, outcome: int) -> BetaPosterior:
        if outcome == 1:
            return BetaPosterior(self.alpha + 1.0, self.beta)
        if outcome == 0:
            return BetaPosterior(self.alpha, self.beta + 1.0)
        raise ValueError(f"outcome must be 0 or 1, got {outcome!r}")

    def sample(self, rng: np.random.Generator) -> float:
        # Beta(a, b) = Ga / (Ga + Gb); numpy's standard_gamma is a Marsaglia-Tsang rejection sampler.
        x = rng.standard_gamma(self.alpha)
        y = rng.standard_gamma(self.beta)
        return float(x / (x + y))

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


def posterior_update(p: BetaPosterior, outcome: int) -> BetaPosterior:
    return p.update(outcome)


def posterior_sample(p: BetaPosterior, rng: np.random.Generator) -> float:
    return p.sample(rng)


class BudgetError(RuntimeError):
    """Raised when a charge would push spending past the budget."""


@dataclass
class BudgetState:
    """Live budget for one run.

    ``round`` is the 0-based index of the user currently being decided on;
    the harness advances it once per streamed user.
    """

    initial: float
    remaining: float
    round: int
    horizon: int

    @classmethod
    def fresh(cls, budget: float, horizon: int) -> BudgetState:
        if budget < 0:
            raise ValueError("budget must be non-negative")
        if horizon < 0:
            raise ValueError("horizon must be non-negative")
        return cls(initial=float(budget), remaining=float(budget), round=0, horizon=int(horizon))

    @property
    def spent(self) -> float:
        return self.initial - self.remaining

    def affordable(self, cost: float) -> bool:
        return cost <= self.remaining

    def charge(self, cost: float) -> None:
        if cost > self.remaining:
            raise BudgetError(
                f"charge of {cost:.4f} exceeds remaining budget {self.remaining:.4f} at round {self.round}"
            )
        self.remaining -= cost


class Reason(str, enum.Enum):
    BUDGET_EXCEEDED = "BudgetExceeded"
    BELOW_THRESHOLD = "BelowThreshold"
    TREATED = "Treated"
    ALWAYS_RULE = "AlwaysRule"


@dataclass(frozen=True)
class Decision:
    treat: int
    reason: Reason
    tau_hat: float = float("nan")
    bonus: float = 0.0
    score: float = float("nan")
    value_per_dollar: float = float("nan")
    threshold: float = float("nan")
    pace: float = float("nan")

    @classmethod
    def budget_exceeded(cls) -> Decision:
        return cls(treat=0, reason=Reason.BUDGET_EXCEEDED)


@dataclass
class Dataset:
    """Column-oriented store of logged users.

    ``cost`` is ``None`` for data that carries no serving costs (the Criteo
    file); experiment streams then attach synthesized costs by position.
    """

    features: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    cost: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.arm = np.asarray(self.arm, dtype=np.int8)
        self.outcome = np.asarray(self.outcome, dtype=np.int8)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n = self.features.shape[0]
        if self.arm.shape != (n,) or self.outcome.shape != (n,):
            raise ValueError("arm and outcome must have one entry per row")
        if self.cost is not None:
            self.cost = np.asarray(self.cost, dtype=np.float64)
            if self.cost.shape != (n,):
                raise ValueError("cost must have one entry per row")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx: np.ndarray, cost: np.ndarray | None = None) -> Dataset:
        if cost is None and self.cost is not None:
            cost = self.cost[idx]
        return Dataset(self.features[idx], self.arm[idx], self.outcome[idx], cost)

    def observation(self, i: int) -> Observation:
        if self.cost is None:
            raise ValueError("dataset has no costs attached")
        return Observation(self.features[i], int(self.arm[i]), int(self.outcome[i]), float(self.cost[i]))

    def __iter__(self):
        return (self.observation(i) for i in range(len(self)))

    @classmethod
    def from_observations(cls, rows: list[Observation]) -> Dataset:
        if not rows:
            return cls(np.zeros((0, 0)), np.zeros(0), np.zeros(0), np.zeros(0))
        return cls(
            np.stack([r.features for r in rows]),
            np.array([r.logged_arm for r in rows]),
            np.array([r.outcome for r in rows]),
            np.array([r.cost for r in rows]),
        )
