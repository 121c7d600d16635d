import gzip
import warnings

import numpy as np
import pytest

from bccb.data import (
    CRITEO_10PCT_ROWS,
    ParseError,
    SchemaError,
    SyntheticEnvConfig,
    generate_synthetic,
    heterogeneity_summary,
    load_criteo,
    shuffle_split,
    split_indices,
    synthesize_costs,
)
from bccb.domain import Dataset

from conftest import criteo_path

HEADER = ",".join([f"f{i}" for i in range(12)] + ["treatment", "conversion", "visit", "exposure"])
ROW1 = ",".join([str(0.5 * i) for i in range(12)] + ["1", "0", "1", "0"])
ROW2 = ",".join([str(-1.25 + i) for i in range(12)] + ["0", "1", "0", "0"])


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadCriteo:
    def test_two_rows_round_trip(self, tmp_path):
        data, summary = load_criteo(write(tmp_path, f"{HEADER}\n{ROW1}\n{ROW2}\n"))
        np.testing.assert_array_equal(data.features[0], [0.5 * i for i in range(12)])
        np.testing.assert_array_equal(data.features[1], [-1.25 + i for i in range(12)])
        assert data.arm.tolist() == [1, 0] and data.outcome.tolist() == [0, 1]
        assert summary.n_rows == 2 and summary.n_features == 12
        assert summary.treated_fraction == 0.5
        assert summary.ate == summary.treated_conversion_rate - summary.control_conversion_rate == -1.0

    def test_missing_column_named(self, tmp_path):
        header = HEADER.replace("treatment", "treat")
        with pytest.raises(SchemaError, match="treatment"):
            load_criteo(write(tmp_path, f"{header}\n{ROW1}\n"))

    def test_bad_row_reports_line(self, tmp_path):
        bad = ROW2.replace("-1.25", "abc", 1)
        with pytest.raises(ParseError, match="line 3"):
            load_criteo(write(tmp_path, f"{HEADER}\n{ROW1}\n{bad}\n"))

    def test_non_binary_treatment(self, tmp_path):
        bad = ",".join(["0"] * 12 + ["2", "0", "0", "0"])
        with pytest.raises(ParseError, match="line 2"):
            load_criteo(write(tmp_path, f"{HEADER}\n{bad}\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_criteo(write(tmp_path, ""))

    def test_header_only(self, tmp_path):
        with pytest.raises(ParseError):
            load_criteo(write(tmp_path, HEADER + "\n"))

    def test_gzip_and_delimiter(self, tmp_path):
        text = f"{HEADER}\n{ROW1}\n{ROW2}\n".replace(",", "\t")
        p = tmp_path / "data.tsv.gz"
        with gzip.open(p, "wt") as fh:
            fh.write(text)
        data, _ = load_criteo(p, delimiter="\t")
        assert len(data) == 2 and data.arm.tolist() == [1, 0]

    def test_row_count_conserved(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = [HEADER]
        for _ in range(1234):
            lines.append(",".join([f"{v:.6f}" for v in rng.normal(size=12)] + ["1", "0", "0", "0"]))
        data, summary = load_criteo(write(tmp_path, "\n".join(lines) + "\n"))
        assert len(data) == summary.n_rows == 1234


class TestCosts:
    def test_bounds_and_mean(self):
        c = synthesize_costs(100_000, seed=2024)
        assert c.min() >= 0.05 and c.max() <= 5.0
        assert 0.72 <= c.mean() <= 0.82

    def test_deterministic(self):
        np.testing.assert_array_equal(synthesize_costs(1000, 5), synthesize_costs(1000, 5))
        assert not np.array_equal(synthesize_costs(1000, 5), synthesize_costs(1000, 6))

    def test_empty(self):
        assert synthesize_costs(0, 1).shape == (0,)


class TestSplit:
    def test_degenerate_train(self):
        train, ev = split_indices(100, 1, eval_size=40)
        assert train.size == 0 and ev.size == 40

    def test_deterministic_and_disjoint(self):
        a = split_indices(1000, 7, eval_size=300, train_size=200)
        b = split_indices(1000, 7, eval_size=300, train_size=200)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert not set(a[0]) & set(a[1])

    def test_prefix_slices_of_one_permutation(self):
        small = split_indices(1000, 7, eval_size=100, train_size=50)
        large = split_indices(1000, 7, eval_size=300, train_size=50)
        np.testing.assert_array_equal(small[0], large[0])
        np.testing.assert_array_equal(small[1], large[1][:100])

    def test_too_large(self):
        with pytest.raises(ValueError):
            split_indices(10, 0, eval_size=8, train_size=3)

    def test_shuffle_split_datasets(self, small_env):
        data, _ = small_env
        train, ev = shuffle_split(data, 3, eval_size=1000, train_size=500)
        assert len(train) == 500 and len(ev) == 1000
        assert ev.cost is not None


class TestSynthetic:
    def test_zero_effect_million(self):
        data, tau = generate_synthetic(SyntheticEnvConfig(n_users=1_000_000, tau_function="zero", base_rate=0.01, seed=1))
        assert np.all(tau == 0)
        t = data.arm == 1
        p1, p0 = data.outcome[t].mean(), data.outcome[~t].mean()
        se = np.sqrt(p1 * (1 - p1) / t.sum() + p0 * (1 - p0) / (~t).sum())
        assert abs(p1 - p0) < 4 * se

    def test_step_difference(self):
        cfg = SyntheticEnvConfig(n_users=1_000_000, tau_function="step-in-x1", tau_scale=0.01, base_rate=0.01, seed=2)
        data, _ = generate_synthetic(cfg)
        hi = data.features[:, 0] > 0
        ates, var = [], 0.0
        for seg in (hi, ~hi):
            t, c = seg & (data.arm == 1), seg & (data.arm == 0)
            p1, p0 = data.outcome[t].mean(), data.outcome[c].mean()
            ates.append(p1 - p0)
            var += p1 * (1 - p1) / t.sum() + p0 * (1 - p0) / c.sum()
        assert abs((ates[0] - ates[1]) - 0.01) < 4 * np.sqrt(var)

    def test_logged_split(self):
        data, _ = generate_synthetic(SyntheticEnvConfig(n_users=100_000, seed=3))
        assert abs(data.arm.mean() - 0.85) < 0.005

    def test_linear_tau_range(self):
        data, tau = generate_synthetic(
            SyntheticEnvConfig(n_users=10_000, tau_function="linear-in-x1", tau_scale=0.01, base_rate=0.02, seed=4)
        )
        assert tau.min() >= -0.01 and tau.max() <= 0.01
        assert np.corrcoef(tau, data.features[:, 0])[0, 1] > 0.9

    @pytest.mark.parametrize(
        "kw",
        [
            {"base_rate": 0.001, "tau_scale": 0.01},
            {"base_rate": 0.995, "tau_scale": 0.01},
            {"tau_function": "quadratic"},
            {"treat_prob": 1.5},
        ],
    )
    def test_invalid_configs(self, kw):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticEnvConfig(n_users=10, **kw))

    def test_deterministic(self):
        a, ta = generate_synthetic(SyntheticEnvConfig(n_users=500, seed=9))
        b, tb = generate_synthetic(SyntheticEnvConfig(n_users=500, seed=9))
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.outcome, b.outcome)
        np.testing.assert_array_equal(a.cost, b.cost)
        np.testing.assert_array_equal(ta, tb)


def test_heterogeneity_summary_detects_step():
    cfg = SyntheticEnvConfig(
        n_users=200_000, feature_dim=4, tau_function="step-in-x1", tau_scale=0.02, base_rate=0.02, seed=5
    )
    data, _ = generate_synthetic(cfg)
    rows = heterogeneity_summary(data)
    assert [r["feature"] for r in rows] == ["f0", "f1", "f2", "f3"]
    assert rows[0]["ate_high"] > 0.015 and abs(rows[0]["ate_low"]) < 0.005


def test_criteo_summary_if_available():
    path = criteo_path()
    if path is None:
        warnings.warn("BCCB_CRITEO_PATH not set; skipping Criteo summary check")
        pytest.skip("Criteo file not available")
    _, s = load_criteo(path)
    assert s.n_rows == CRITEO_10PCT_ROWS
    assert 0.84 <= s.treated_fraction <= 0.86
    assert abs(s.treated_conversion_rate - 0.0031) <= 0.0005
    assert abs(s.control_conversion_rate - 0.0019) <= 0.0005
