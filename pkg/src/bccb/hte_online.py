"""Online two-model (treated / control) estimation of heterogeneous treatment effects."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Clamp on the logit so predicted probabilities stay strictly inside (0, 1).
_MAX_MARGIN = 35.0


def sigmoid(z: float) -> float:
    z = min(max(z, -_MAX_MARGIN), _MAX_MARGIN)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _check_vector(x: np.ndarray, dim: int) -> None:
    if x.shape != (dim,):
        raise ValueError(f"expected feature vector of shape ({dim},), got {x.shape}")


@dataclass
class HteConfig:
    learning_rate: float = 0.01
    l2: float = 1e-4
    warmup_min: int = 50
    warmup_prior: float = 0.002
    var_floor: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.warmup_min < 0:
            raise ValueError("warmup_min must be non-negative")


@dataclass
class LinearLogisticScorer:
    """Logistic regression trained one example at a time with plain SGD.

    The per-example loss is the log loss plus ``l2 / 2 * ||weights||^2``
    (the bias is not penalised).
    """

    weights: np.ndarray
    bias: float = 0.0
    learning_rate: float = 0.01
    l2: float = 1e-4
    updates_seen: int = 0

    @classmethod
    def zeros(cls, dim: int, learning_rate: float = 0.01, l2: float = 1e-4) -> LinearLogisticScorer:
        return cls(np.zeros(dim), 0.0, learning_rate, l2)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def predict_prob(self, z: np.ndarray) -> float:
        _check_vector(z, self.dim)
        return sigmoid(float(self.weights @ z) + self.bias)

    def gradient(self, z: np.ndarray, outcome: int) -> tuple[np.ndarray, float]:
        """Gradient of the penalised log loss w.r.t. (weights, bias)."""
        err = self.predict_prob(z) - outcome
        return err * z + self.l2 * self.weights, err

    def sgd_step(self, z: np.ndarray, outcome: int) -> None:
        if outcome not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {outcome!r}")
        if not np.all(np.isfinite(z)):
            raise ValueError("features must be finite")
        grad_w, grad_b = self.gradient(z, outcome)
        self.weights = self.weights - self.learning_rate * grad_w
        self.bias -= self.learning_rate * grad_b
        self.updates_seen += 1

    def copy(self) -> LinearLogisticScorer:
        return LinearLogisticScorer(self.weights.copy(), self.bias, self.learning_rate, self.l2, self.updates_seen)


def predict_prob(model: LinearLogisticScorer, features: np.ndarray) -> float:
    return model.predict_prob(features)


def sgd_step(model: LinearLogisticScorer, features: np.ndarray, outcome: int) -> LinearLogisticScorer:
    """Functional form of :meth:`LinearLogisticScorer.sgd_step`; the input model is left untouched."""
    new = model.copy()
    new.sgd_step(features, outcome)
    return new


@dataclass
class RunningStandardizer:
    """Per-feature running mean and variance (Welford)."""

    count: int
    mean: np.ndarray
    m2: np.ndarray
    var_floor: float = 1e-8

    @classmethod
    def empty(cls, dim: int, var_floor: float = 1e-8) -> RunningStandardizer:
        return cls(0, np.zeros(dim), np.zeros(dim), var_floor)

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.ones_like(self.mean)
        return np.maximum(self.m2 / self.count, self.var_floor)

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return x - self.mean
        return (x - self.mean) / np.sqrt(self.variance)


@dataclass
class TwoModelHte:
    """T-learner with an optimistic constant effect until both arms have enough data."""

    treated_model: LinearLogisticScorer
    control_model: LinearLogisticScorer
    standardizer: RunningStandardizer
    config: HteConfig = field(default_factory=HteConfig)
    treated_count: int = 0
    control_count: int = 0

    @classmethod
    def create(cls, dim: int, config: HteConfig | None = None) -> TwoModelHte:
        config = config or HteConfig()
        return cls(
            treated_model=LinearLogisticScorer.zeros(dim, config.learning_rate, config.l2),
            control_model=LinearLogisticScorer.zeros(dim, config.learning_rate, config.l2),
            standardizer=RunningStandardizer.empty(dim, config.var_floor),
            config=config,
        )

    @property
    def dim(self) -> int:
        return self.treated_model.dim

    @property
    def in_warmup(self) -> bool:
        m = self.config.warmup_min
        return self.treated_count < m or self.control_count < m

    def predict_tau(self, features: np.ndarray) -> float:
        _check_vector(features, self.dim)
        if self.in_warmup:
            return self.config.warmup_prior
        z = self.standardizer.transform(features)
        return self.treated_model.predict_prob(z) - self.control_model.predict_prob(z)

    def observe(self, features: np.ndarray, arm: int, outcome: int) -> None:
        _check_vector(features, self.dim)
        if arm not in (0, 1):
            raise ValueError(f"arm must be 0 or 1, got {arm!r}")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        self.standardizer.update(features)
        z = self.standardizer.transform(features)
        if arm == 1:
            self.treated_model.sgd_step(z, outcome)
            self.treated_count += 1
        else:
            self.control_model.sgd_step(z, outcome)
            self.control_count += 1

    def state_dict(self) -> dict:
        """Flat, JSON-serialisable snapshot of everything that affects predictions."""
        return {
            "treated_weights": self.treated_model.weights.tolist(),
            "treated_bias": self.treated_model.bias,
            "treated_updates": self.treated_model.updates_seen,
            "control_weights": self.control_model.weights.tolist(),
            "control_bias": self.control_model.bias,
            "control_updates": self.control_model.updates_seen,
            "treated_count": self.treated_count,
            "control_count": self.control_count,
            "std_count": self.standardizer.count,
            "std_mean": self.standardizer.mean.tolist(),
            "std_m2": self.standardizer.m2.tolist(),
        }
