"""Acceptance criteria 1-12. Each test records one PASS/FAIL/SKIP line, printed at the end of the run."""

import math
import subprocess
import sys
import warnings

import numpy as np
import pytest

from bccb.data import (
    CRITEO_10PCT_ROWS,
    SyntheticEnvConfig,
    generate_synthetic,
    load_criteo,
    synthesize_costs,
)
from bccb.domain import BetaPosterior, Dataset, make_rng
from bccb.hte_online import HteConfig, LinearLogisticScorer, TwoModelHte
from bccb.policies import (
    POLICY_NAMES,
    AlwaysTreatPolicy,
    BccbPolicy,
    FitFailure,
    OfflineUpliftPolicy,
    PolicyConfig,
    make_policy,
    offline_uplift_fit,
    paced_threshold,
)
from bccb.replay import run_replay
from bccb.synthetic_suite import hte_rank_correlation, midpoint_spend_fraction

from conftest import ACCEPTANCE_LINES, criteo_path

SEEDS = (42, 123, 456)


def record(number, title, passed, detail):
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    ACCEPTANCE_LINES.append(f"[{status}] {number:>2}. {title}: {detail}")


def _log_loss(w, b, x, y, l2):
    m = float(np.dot(w, x) + b)
    nll = math.log1p(math.exp(-m)) if y == 1 else math.log1p(math.exp(m))
    return nll + 0.5 * l2 * float(np.dot(w, w))


def test_01_budget_safety():
    rng = np.random.default_rng(20240101)
    runs = violations = overdrafts = 0
    for i in range(200):
        name = POLICY_NAMES[i % len(POLICY_NAMES)]
        tau_fn = ("zero", "step-in-x1", "linear-in-x1")[int(rng.integers(3))]
        env = SyntheticEnvConfig(
            n_users=int(rng.integers(500, 2500)),
            feature_dim=int(rng.integers(2, 13)),
            base_rate=float(rng.uniform(0.02, 0.2)),
            tau_function=tau_fn,
            tau_scale=float(rng.uniform(0.0, 0.02)),
            treat_prob=float(rng.uniform(0.15, 0.85)),
            seed=int(rng.integers(2**31)),
        )
        data, _ = generate_synthetic(env)
        cfg = PolicyConfig(
            eta=float(rng.uniform(0, 1)),
            lam=float(10 ** rng.uniform(-4, -2)),
            lambda_b=float(rng.uniform(0, 0.05)),
            lambda_off=float(10 ** rng.uniform(-4, -2)),
            offline_epochs=int(rng.integers(1, 4)),
            pacing=bool(rng.integers(2)),
            hte=HteConfig(warmup_min=int(rng.integers(0, 60))),
        )
        budget = float(rng.choice([0.0, rng.uniform(0.01, 5.0), rng.uniform(5.0, 500.0)]))
        model = None
        if name == "offline_uplift":
            train = data.take(np.arange(300))
            data = data.take(np.arange(300, len(data)))
            model = offline_uplift_fit(train, cfg.offline_epochs, cfg.hte, seed=i)
        policy = make_policy(name, data.dim, seed=i, config=cfg, offline_model=model)
        metrics, log = run_replay(data, policy, budget, return_log=True)
        runs += 1
        # independent re-simulation of the remaining budget, round by round
        remaining = budget
        for t in range(len(log.treat)):
            if log.treat[t] == 1 and log.cost[t] > remaining:
                violations += 1
            if log.treat[t] == 1 and log.logged_arm[t] == 1:
                remaining -= log.cost[t]
        if metrics.total_cost > budget:
            overdrafts += 1
    passed = runs == 200 and violations == 0 and overdrafts == 0
    record(1, "budget safety", passed,
           f"{runs} randomized runs over {len(POLICY_NAMES)} policies; {overdrafts} overdrafts, "
           f"{violations} treat decisions with cost > remaining (tolerance: exact)")
    assert passed


def test_02_gradient_correctness():
    rng = np.random.default_rng(2)
    h, worst = 1e-5, 0.0
    for _ in range(100):
        d = int(rng.integers(1, 16))
        w, b = rng.normal(0, 0.5, d), float(rng.normal())
        x, y, l2 = rng.normal(0, 1, d), int(rng.integers(2)), float(rng.uniform(0, 0.1))
        gw, gb = LinearLogisticScorer(w.copy(), b, 0.01, l2).gradient(x, y)
        num = np.empty(d + 1)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            num[j] = (_log_loss(w + e, b, x, y, l2) - _log_loss(w - e, b, x, y, l2)) / (2 * h)
        num[d] = (_log_loss(w, b + h, x, y, l2) - _log_loss(w, b - h, x, y, l2)) / (2 * h)
        ana = np.append(gw, gb)
        worst = max(worst, float(np.linalg.norm(ana - num) / np.linalg.norm(ana)))
    passed = worst < 1e-6
    record(2, "gradient correctness", passed, f"max relative error {worst:.2e} over 100 instances (tolerance < 1e-6)")
    assert passed


def test_03_warmup_exactness():
    rng = np.random.default_rng(3)
    hte = TwoModelHte.create(12)
    probe = rng.normal(size=(20, 12))
    exact = True
    order = [1] * 80 + [0] * 49 + [0]
    for arm in order:
        if hte.in_warmup:
            exact &= all(hte.predict_tau(p) == 0.002 for p in probe)
        hte.observe(rng.normal(size=12), arm, int(rng.random() < 0.3))
    assert hte.treated_count == 80 and hte.control_count == 50 and not hte.in_warmup
    z = hte.standardizer.transform(probe[0])
    expected = hte.treated_model.predict_prob(z) - hte.control_model.predict_prob(z)
    first_post = hte.predict_tau(probe[0])
    uses_models = first_post == expected and first_post != 0.002
    passed = bool(exact and uses_models)
    record(3, "warm-up exactness", passed,
           f"prior returned exactly 0.002 until both arms reached 50; first post-warm-up tau {first_post:.6g} "
           f"equals model difference: {uses_models} (tolerance: exact)")
    assert passed


def test_04_posterior_correctness():
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(500):
        ys = rng.integers(0, 2, size=int(rng.integers(0, 300)))
        p = BetaPosterior()
        for y in ys:
            p = p.update(int(y))
        ok &= (p.alpha - 1, p.beta - 1) == (int(ys.sum()), int(len(ys) - ys.sum()))
    r = make_rng(4)
    mean = float(np.mean([BetaPosterior().sample(r) for _ in range(100_000)]))
    passed = bool(ok and 0.49 <= mean <= 0.51)
    record(4, "posterior correctness", passed,
           f"counts match on 500 random sequences: {ok}; Beta(1,1) mean over 1e5 draws {mean:.4f} (in [0.49, 0.51])")
    assert passed


def test_05_pacing_behavior():
    paces = np.geomspace(1e-6, 1e3, 400)
    th = np.array([paced_threshold(0.001, p, 1e-6) for p in paces])
    monotone = bool(np.all(np.diff(th) < 0))
    fracs = []
    for s in SEEDS:
        data, _ = generate_synthetic(SyntheticEnvConfig(n_users=20_000, tau_function="zero", base_rate=0.0025, seed=s))
        m = run_replay(data, BccbPolicy(data.dim, s), float(data.cost.sum()))
        fracs.append(midpoint_spend_fraction(m))
    in_band = all(0.3 <= f <= 0.7 for f in fracs)
    passed = monotone and in_band
    record(5, "pacing behavior", passed,
           f"threshold strictly decreasing in pace: {monotone}; midpoint spend fractions "
           f"{[round(f, 3) for f in fracs]} (each in [0.3, 0.7])")
    assert passed


def test_06_cost_synthesis():
    c = synthesize_costs(100_000, seed=2024)
    bounded = bool(c.min() >= 0.05 and c.max() <= 5.0)
    mean = float(c.mean())
    same = bool(np.array_equal(c, synthesize_costs(100_000, seed=2024)))
    passed = bounded and 0.72 <= mean <= 0.82 and same
    record(6, "cost synthesis", passed,
           f"range [{c.min():.3f}, {c.max():.3f}] within [0.05, 5.00]; mean {mean:.4f} (in [0.72, 0.82]); "
           f"same seed identical: {same}")
    assert passed


@pytest.mark.slow
def test_07_hte_learnability():
    rhos = [hte_rank_correlation(s, dim=12) for s in SEEDS]
    mean = float(np.mean(rhos))
    passed = mean >= 0.8
    record(7, "HTE learnability", passed,
           f"mean Spearman {mean:.3f} over seeds {SEEDS} (per seed {[round(r, 3) for r in rhos]}; threshold >= 0.8)")
    assert passed


def test_08_offline_failure_mode():
    data, _ = generate_synthetic(SyntheticEnvConfig(n_users=6000, base_rate=0.02, tau_scale=0.02, seed=8))
    train, stream = data.take(np.arange(3000)), data.take(np.arange(3000, 6000))
    outcome = train.outcome.copy()
    outcome[train.arm == 0] = 0
    assert train.outcome[train.arm == 0].sum() > 0  # the original slice did have control positives
    sliced = Dataset(train.features, train.arm, outcome, train.cost)
    model = offline_uplift_fit(sliced)
    failed = isinstance(model, FitFailure)
    m = run_replay(stream, OfflineUpliftPolicy(model), 1000.0)
    passed = failed and m.conversions == 0
    reason = model.reason if failed else "fit succeeded"
    record(8, "offline failure mode", passed,
           f"FitFailure returned: {failed} ({reason}); downstream conversions {m.conversions} (tolerance: exact 0)")
    assert passed


def test_09_replay_no_leak():
    # users (cost, logged_arm, outcome): (0.5, 1, 1), (0.5, 0, 0), (0.5, 1, 0); always-treat; B = 1.0
    users = Dataset(np.zeros((3, 2)), np.array([1, 0, 1]), np.array([1, 0, 0]), np.array([0.5, 0.5, 0.5]))
    m = run_replay(users, AlwaysTreatPolicy(), 1.0)
    hand = (m.conversions, m.total_cost, m.matched, m.skipped) == (1, 1.0, 2, 1)
    data, _ = generate_synthetic(SyntheticEnvConfig(n_users=3000, seed=9))
    audited = []
    for name in ("bccb", "ts", "budgeted_ts", "hte_greedy"):
        mm = run_replay(data, make_policy(name, data.dim, 9), 100.0, audit=True)  # raises on any leak
        audited.append(mm.skipped)
    passed = hand and all(s > 0 for s in audited)
    record(9, "replay no-leak", passed,
           f"hand trace conversions={m.conversions} cost={m.total_cost} matched={m.matched} skipped={m.skipped}; "
           f"byte-identical state on {sum(audited)} skipped rounds across 4 learning policies (tolerance: exact)")
    assert passed


@pytest.mark.slow
def test_10_criteo_table_shape():
    path = criteo_path()
    if path is None:
        record(10, "Criteo budget-sweep shape", None, "BCCB_CRITEO_PATH not set; dataset-gated check skipped")
        warnings.warn("criterion 10 skipped: Criteo file not available")
        pytest.skip("Criteo file not available")
    from bccb.experiments import ExperimentConfig, load_dataset, run_budget_sweep

    cfg = ExperimentConfig(data=str(path), budgets=[8000.0], users=100_000, policies=["ts", "bccb"], seeds=list(SEEDS))
    table = run_budget_sweep(cfg, load_dataset(cfg))
    means = {a["policy"]: a["conversions_mean"] for a in table.aggregate()}
    passed = means["bccb"] >= means["ts"]
    record(10, "Criteo budget-sweep shape", passed,
           f"mean conversions at $8000: bccb {means['bccb']:.1f} vs ts {means['ts']:.1f} (requires bccb >= ts)")
    assert passed


def test_11_criteo_summary():
    path = criteo_path()
    if path is None:
        record(11, "Criteo dataset summary", None, "BCCB_CRITEO_PATH not set; dataset-gated check skipped")
        warnings.warn("criterion 11 skipped: Criteo file not available")
        pytest.skip("Criteo file not available")
    _, s = load_criteo(path)
    passed = (
        s.n_rows == CRITEO_10PCT_ROWS
        and 0.84 <= s.treated_fraction <= 0.86
        and abs(s.treated_conversion_rate - 0.0031) <= 0.0005
        and abs(s.control_conversion_rate - 0.0019) <= 0.0005
    )
    record(11, "Criteo dataset summary", passed,
           f"n_rows {s.n_rows}, treated fraction {s.treated_fraction:.4f}, rates "
           f"{s.treated_conversion_rate:.5f}/{s.control_conversion_rate:.5f}")
    assert passed


@pytest.mark.slow
def test_12_end_to_end_determinism(tmp_path):
    outs = []
    for run in ("first", "second"):
        out = tmp_path / run
        cmd = [sys.executable, "-m", "bccb.cli", "sweep", "--users", "10000", "--seeds", ",".join(map(str, SEEDS)),
               "--out", str(out)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append((out / "budget_sweep_per_seed.csv").read_bytes())
    passed = outs[0] == outs[1]
    n_rows = outs[0].count(b"\n") - 1
    record(12, "end-to-end determinism", passed,
           f"two separate `bccb sweep` processes wrote byte-identical per-seed CSVs ({n_rows} rows): {passed}")
    assert passed
