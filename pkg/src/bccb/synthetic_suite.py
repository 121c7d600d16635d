"""Property checks that need a ground-truth environment (known tau per user)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import SyntheticEnvConfig, generate_synthetic
from .domain import Dataset
from .experiments import ExperimentConfig, write_csv
from .hte_online import HteConfig, TwoModelHte
from .policies import make_policy, offline_uplift_fit
from .replay import RoundLog, run_replay

LEARNED_POLICIES = ("ts", "budgeted_ts", "hte_greedy", "bccb", "offline_uplift")


@dataclass
class PropertyResult:
    name: str
    passed: bool
    statistic: float
    threshold: str
    detail: str = ""


def hte_rank_correlation(
    seed: int,
    dim: int,
    n_train: int = 20_000,
    n_test: int = 1_000,
    tau_scale: float = 0.01,
    base_rate: float = 0.01,
    hte_config: HteConfig | None = None,
) -> float:
    """Spearman correlation between learned and true tau after ``n_train`` balanced observations.

    The stream comes from the step environment with a 50/50 logged split.
    """
    env = SyntheticEnvConfig(
        n_users=n_train + n_test,
        feature_dim=dim,
        base_rate=base_rate,
        tau_function="step-in-x1",
        tau_scale=tau_scale,
        treat_prob=0.5,
        seed=seed,
    )
    data, tau = generate_synthetic(env)
    hte = TwoModelHte.create(dim, hte_config)
    for i in range(n_train):
        hte.observe(data.features[i], int(data.arm[i]), int(data.outcome[i]))
    pred = [hte.predict_tau(data.features[i]) for i in range(n_train, n_train + n_test)]
    return float(spearmanr(pred, tau[n_train:]).statistic)


def midpoint_spend_fraction(metrics) -> float:
    """Cumulative spend at the stream midpoint as a fraction of final spend."""
    half = metrics.streamed // 2
    spend = dict(metrics.spend_trajectory)
    if half not in spend:
        raise ValueError("midpoint is not a trajectory checkpoint")
    return spend[half] / metrics.total_cost if metrics.total_cost > 0 else math.nan


def oracle_uplift(data: Dataset, tau: np.ndarray, budget: float) -> float:
    """Best expected uplift under the budget with full information, by greedy tau/cost.

    Only logged-treated users are eligible, since they are the only ones a
    replayed policy can be credited for treating.
    """
    eligible = np.flatnonzero((data.arm == 1) & (tau > 0))
    order = eligible[np.argsort(-tau[eligible] / data.cost[eligible], kind="stable")]
    total, spent = 0.0, 0.0
    for i in order:
        c = data.cost[i]
        if spent + c <= budget:
            spent += c
            total += tau[i]
    return total


def warmup_end(log: RoundLog, warmup_min: int) -> int:
    """First round index after which both arms have ``warmup_min`` matched observations."""
    m = log.matched
    t_cum = np.cumsum(m & (log.treat == 1))
    c_cum = np.cumsum(m & (log.treat == 0))
    done = np.flatnonzero((t_cum >= warmup_min) & (c_cum >= warmup_min))
    return int(done[0]) + 1 if done.size else len(m)


def _env(config: ExperimentConfig, seed: int, n: int, tau_function: str, tau_scale: float, base_rate: float):
    return generate_synthetic(
        SyntheticEnvConfig(
            n_users=n,
            feature_dim=config.synth_dim,
            base_rate=base_rate,
            tau_function=tau_function,
            tau_scale=tau_scale,
            seed=seed,
        )
    )


def run_synthetic_suite(config: ExperimentConfig, users: int = 20_000) -> list[PropertyResult]:
    pcfg = config.policy_config()
    seeds = list(config.seeds)
    results: list[PropertyResult] = []
    budget_violations = []

    def replay(data, name, budget, seed, offline_model=None, **kw):
        policy = make_policy(name, data.dim, seed, pcfg, offline_model)
        out = run_replay(data, policy, budget, **kw)
        m = out[0] if isinstance(out, tuple) else out
        if m.total_cost > budget:
            budget_violations.append((name, seed, m.total_cost, budget))
        return out

    # HTE learnability on the step environment
    rhos = [hte_rank_correlation(s, config.synth_dim, hte_config=pcfg.hte) for s in seeds]
    mean_rho = float(np.mean(rhos))
    results.append(
        PropertyResult(
            "hte_learnability", mean_rho >= 0.8, mean_rho, ">= 0.8",
            f"dim={config.synth_dim} spearman per seed {[round(r, 3) for r in rhos]}",
        )
    )

    # near-linear spend with ample budget on a homogeneous stream
    fracs = []
    for s in seeds:
        data, _ = _env(config, s, users, "zero", 0.0, 0.0025)
        m = replay(data, "bccb", float(data.cost.sum()), s)
        fracs.append(midpoint_spend_fraction(m))
    ok = all(0.3 <= f <= 0.7 for f in fracs)
    results.append(
        PropertyResult("pacing_linearity", ok, float(np.mean(fracs)), "each in [0.3, 0.7]",
                       f"midpoint fractions {[round(f, 3) for f in fracs]}")
    )

    # no feature signal: conversion rate among treated users is the base rate for every policy
    zs = {}
    for name in LEARNED_POLICIES:
        conv = treated = 0
        for s in seeds:
            data, _ = _env(config, s, users + 10_000, "zero", 0.0, 0.01)
            train, stream = data.take(np.arange(10_000)), data.take(np.arange(10_000, len(data)))
            model = offline_uplift_fit(train, pcfg.offline_epochs, pcfg.hte, seed=s) if name == "offline_uplift" else None
            m = replay(stream, name, 2000.0, s, model)
            conv += m.conversions
            treated += m.treated_matched
        if treated:
            se = math.sqrt(0.01 * 0.99 / treated)
            zs[name] = (conv / treated - 0.01) / se
    worst = max((abs(z) for z in zs.values()), default=0.0)
    results.append(
        PropertyResult("zero_tau_no_signal", worst < 4.0, worst, "|z| < 4 for every policy",
                       "z of treated conversion rate vs base 0.01: " + json.dumps({k: round(v, 2) for k, v in zs.items()}))
    )

    # step environment: BCCB targets the responsive segment after warm-up
    hi_t = hi_n = lo_t = lo_n = 0
    for s in seeds:
        data, tau = _env(config, s, users, "step-in-x1", 0.02, 0.02)
        m, log = replay(data, "bccb", 2000.0, s, return_log=True)
        start = warmup_end(log, pcfg.hte.warmup_min)
        hi = tau[start:] > 0
        treat = log.treat[start:]
        hi_t += int(treat[hi].sum())
        hi_n += int(hi.sum())
        lo_t += int(treat[~hi].sum())
        lo_n += int((~hi).sum())
    rate_hi = hi_t / hi_n if hi_n else 0.0
    rate_lo = lo_t / lo_n if lo_n else 0.0
    results.append(
        PropertyResult("step_tau_targeting", rate_hi > rate_lo, rate_hi - rate_lo, "high-segment rate > low-segment rate",
                       f"post-warm-up treat rate high={rate_hi:.4f} low={rate_lo:.4f}")
    )

    # full-information greedy upper-bounds every learned policy's expected uplift
    budget = 300.0
    oracle, learned = [], {n: [] for n in LEARNED_POLICIES}
    for s in seeds:
        data, tau = _env(config, s, users + 10_000, "step-in-x1", 0.02, 0.02)
        train_idx, eval_idx = np.arange(10_000), np.arange(10_000, len(data))
        train, stream, stream_tau = data.take(train_idx), data.take(eval_idx), tau[eval_idx]
        oracle.append(oracle_uplift(stream, stream_tau, budget))
        for name in LEARNED_POLICIES:
            model = offline_uplift_fit(train, pcfg.offline_epochs, pcfg.hte, seed=s) if name == "offline_uplift" else None
            m, log = replay(stream, name, budget, s, model, return_log=True)
            got = log.matched & (log.treat == 1)
            learned[name].append(float(stream_tau[got].sum()))
    o = float(np.mean(oracle))
    means = {n: float(np.mean(v)) for n, v in learned.items()}
    results.append(
        PropertyResult("oracle_upper_bound", all(o >= v for v in means.values()), o - max(means.values()),
                       "oracle mean >= every policy mean",
                       f"oracle={o:.3f} " + json.dumps({k: round(v, 3) for k, v in means.items()}))
    )

    results.append(
        PropertyResult("budget_safety", not budget_violations, float(len(budget_violations)), "0 violations",
                       json.dumps(budget_violations))
    )
    return results


def emit_suite(results: list[PropertyResult], config: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [asdict(r) for r in results]
    path = out / "synthetic_suite.csv"
    write_csv(path, rows, ["name", "passed", "statistic", "threshold", "detail"])
    (out / "synthetic_suite_manifest.json").write_text(
        json.dumps({"config": config.to_flat(), "config_hash": config.config_hash(), "properties": rows}, indent=2) + "\n"
    )
    return path
