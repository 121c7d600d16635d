"""Replay evaluation of sequential policies on logged randomized-trial data.

A streamed user only reaches the policy's learner (and the budget) when the
policy's decision equals the arm the user was actually assigned in the
trial. Mismatched users are skipped with no state change.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import IO

import numpy as np

from .domain import BudgetState, Dataset, Decision, Reason
from .policies import FitFailure, OfflineUpliftModel, Policy, PolicyConfig, PolicyContext, make_policy

CHECKPOINT_EVERY = 1000


class ReplayError(RuntimeError):
    pass


@dataclass
class RunMetrics:
    conversions: int = 0
    control_conversions: int = 0
    total_cost: float = 0.0
    treatment_rate: float = 0.0
    cost_per_conversion: float | None = None
    matched: int = 0
    skipped: int = 0
    streamed: int = 0
    treated_matched: int = 0
    budget: float = 0.0
    remaining: float = 0.0
    spend_trajectory: list[tuple[int, float]] = field(default_factory=list)

    def as_row(self) -> dict:
        row = asdict(self)
        del row["spend_trajectory"]
        return row


@dataclass
class RoundLog:
    """Per-round record arrays for one replay run."""

    treat: np.ndarray
    logged_arm: np.ndarray
    outcome: np.ndarray
    cost: np.ndarray

    @property
    def matched(self) -> np.ndarray:
        return self.treat == self.logged_arm

    def charged(self) -> np.ndarray:
        return np.where(self.matched & (self.treat == 1), self.cost, 0.0)


def harness_budget_guard(ctx: PolicyContext, decision: Decision) -> Decision:
    """Force not-treat whenever the user is unaffordable, whatever the policy said."""
    if decision.treat and ctx.cost > ctx.budget.remaining:
        return replace(decision, treat=0, reason=Reason.BUDGET_EXCEEDED)
    return decision


def compute_metrics(log: RoundLog, budget: float, checkpoint_every: int = CHECKPOINT_EVERY) -> RunMetrics:
    n = log.treat.shape[0]
    if n == 0:
        return RunMetrics(budget=budget, remaining=budget)
    matched = log.matched
    treated_matched = matched & (log.treat == 1)
    charged = np.where(treated_matched, log.cost, 0.0)
    # Sequential cumsum keeps the total bit-identical to the running budget arithmetic.
    spend = np.cumsum(charged)
    total_cost = float(spend[-1])
    conversions = int(np.sum(treated_matched & (log.outcome == 1)))
    control_conv = int(np.sum(matched & (log.treat == 0) & (log.outcome == 1)))
    marks = list(range(checkpoint_every, n + 1, checkpoint_every))
    if not marks or marks[-1] != n:
        marks.append(n)
    return RunMetrics(
        conversions=conversions,
        control_conversions=control_conv,
        total_cost=total_cost,
        treatment_rate=float(np.mean(log.treat)),
        cost_per_conversion=total_cost / conversions if conversions > 0 else None,
        matched=int(matched.sum()),
        skipped=int(n - matched.sum()),
        streamed=n,
        treated_matched=int(treated_matched.sum()),
        budget=budget,
        remaining=budget - total_cost,
        spend_trajectory=[(m, float(spend[m - 1])) for m in marks],
    )


def _state_bytes(policy: Policy) -> bytes:
    return json.dumps(policy.state_dict(), sort_keys=True).encode()


def run_replay(
    stream: Dataset,
    policy: Policy,
    budget: float,
    horizon: int | None = None,
    trace: IO[str] | None = None,
    audit: bool = False,
    return_log: bool = False,
) -> RunMetrics | tuple[RunMetrics, RoundLog]:
    """Stream ``stream`` through ``policy`` under a hard budget ``budget``.

    Args:
        stream: users in arrival order; must carry costs.
        policy: a freshly constructed policy.
        budget: total budget B.
        horizon: pacing horizon T; defaults to ``len(stream)``. The first T
            users are streamed.
        trace: optional text handle receiving one JSON line per round.
        audit: if set, verify the policy's learned state and the budget are
            untouched on every skipped round (slow; used by tests).
        return_log: also return the per-round :class:`RoundLog`.
    """
    if stream.cost is None:
        raise ValueError("stream has no costs attached")
    horizon = len(stream) if horizon is None else horizon
    if horizon > len(stream):
        raise ReplayError(f"stream has {len(stream)} users but horizon is {horizon}")
    if budget < 0:
        raise ValueError("budget must be non-negative")

    state = BudgetState.fresh(budget, horizon)
    features = stream.features
    costs = stream.cost[:horizon].tolist()
    arms = stream.arm[:horizon].tolist()
    outcomes = stream.outcome[:horizon].tolist()
    treat = np.zeros(horizon, dtype=np.int8)

    for t in range(horizon):
        state.round = t
        ctx = PolicyContext(features[t], costs[t], state)
        if audit:
            before = _state_bytes(policy), state.remaining
        try:
            decision = harness_budget_guard(ctx, policy.decide(ctx))
        except Exception as exc:
            raise ReplayError(f"policy {policy.name!r} failed at round {t}: {exc}") from exc
        a = decision.treat
        treat[t] = a
        matched = a == arms[t]
        if matched:
            try:
                policy.observe(ctx, a, outcomes[t])
            except Exception as exc:
                raise ReplayError(f"policy {policy.name!r} failed to observe at round {t}: {exc}") from exc
        elif audit:
            if before != (_state_bytes(policy), state.remaining):
                raise ReplayError(f"state changed on skipped round {t}")
        if trace is not None:
            trace.write(
                json.dumps(
                    {
                        "round": t,
                        "cost": costs[t],
                        "decision": a,
                        "logged_arm": arms[t],
                        "matched": bool(matched),
                        "outcome": outcomes[t],
                        "remaining_budget": state.remaining,
                        "tau_hat": _finite_or_none(decision.tau_hat),
                        "pace": _finite_or_none(decision.pace),
                        "threshold": _finite_or_none(decision.threshold),
                    }
                )
                + "\n"
            )

    log = RoundLog(treat, stream.arm[:horizon].copy(), stream.outcome[:horizon].copy(), stream.cost[:horizon].copy())
    metrics = compute_metrics(log, budget)
    if audit and not math.isclose(metrics.remaining, state.remaining, rel_tol=0, abs_tol=1e-9):
        raise ReplayError("budget accounting mismatch between harness and metrics")
    return (metrics, log) if return_log else metrics


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def replay_policy(
    stream: Dataset,
    name: str,
    budget: float,
    seed: int,
    config: PolicyConfig | None = None,
    offline_model: OfflineUpliftModel | FitFailure | None = None,
    **kwargs,
) -> RunMetrics:
    """Build a fresh policy by name with ``seed`` and replay it."""
    policy = make_policy(name, stream.dim, seed, config, offline_model)
    return run_replay(stream, policy, budget, **kwargs)
