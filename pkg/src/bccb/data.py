"""Loading logged trial data, synthesizing costs, and generating synthetic environments."""

from __future__ import annotations

import csv
import gzip
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .domain import Dataset, make_rng

N_FEATURES = 12
FEATURE_COLUMNS = tuple(f"f{i}" for i in range(N_FEATURES))
REQUIRED_COLUMNS = FEATURE_COLUMNS + ("treatment", "conversion")
CRITEO_10PCT_ROWS = 1_397_960

COST_MU = -0.5
COST_SIGMA = 0.7
COST_MIN = 0.05
COST_MAX = 5.00

_CHUNK = 65536


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class DatasetSummary:
    n_rows: int
    n_features: int
    treated_fraction: float
    treated_conversion_rate: float
    control_conversion_rate: float
    ate: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def summarize(data: Dataset) -> DatasetSummary:
    n = len(data)
    if n == 0:
        return DatasetSummary(0, data.dim, 0.0, 0.0, 0.0, 0.0)
    treated = data.arm == 1
    n_t = int(treated.sum())
    rate_t = float(data.outcome[treated].mean()) if n_t else 0.0
    rate_c = float(data.outcome[~treated].mean()) if n_t < n else 0.0
    return DatasetSummary(
        n_rows=n,
        n_features=data.dim,
        treated_fraction=n_t / n,
        treated_conversion_rate=rate_t,
        control_conversion_rate=rate_c,
        ate=rate_t - rate_c,
    )


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def _parse_binary(value: str, column: str, line: int) -> int:
    try:
        v = float(value)
    except ValueError:
        raise ParseError(f"line {line}: column {column!r} is not numeric: {value!r}") from None
    if v not in (0.0, 1.0):
        raise ParseError(f"line {line}: column {column!r} must be 0 or 1, got {value!r}")
    return int(v)


def load_criteo(path: str | Path, delimiter: str = ",") -> tuple[Dataset, DatasetSummary]:
    """Read a Criteo-uplift style file in one pass.

    The header must name f0..f11, treatment and conversion; other columns
    (visit, exposure) are ignored. Rows are parsed into fixed-size numpy
    chunks so memory stays proportional to the output arrays. ``.gz`` files
    are decompressed on the fly.
    """
    path = Path(path)
    with _open_text(path) as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: file is empty") from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing required column {col!r}")
        feat_idx = [header.index(c) for c in FEATURE_COLUMNS]
        t_idx = header.index("treatment")
        y_idx = header.index("conversion")
        width = len(header)

        feat_chunks, arm_chunks, y_chunks = [], [], []
        buf = np.empty((_CHUNK, N_FEATURES))
        arm_buf = np.empty(_CHUNK, dtype=np.int8)
        y_buf = np.empty(_CHUNK, dtype=np.int8)
        k = 0
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}: line {line}: expected {width} fields, got {len(row)}")
            try:
                buf[k] = [float(row[j]) for j in feat_idx]
            except ValueError:
                raise ParseError(f"{path}: line {line}: non-numeric feature value") from None
            if not np.all(np.isfinite(buf[k])):
                raise ParseError(f"{path}: line {line}: non-finite feature value")
            arm_buf[k] = _parse_binary(row[t_idx], "treatment", line)
            y_buf[k] = _parse_binary(row[y_idx], "conversion", line)
            k += 1
            if k == _CHUNK:
                feat_chunks.append(buf.copy())
                arm_chunks.append(arm_buf.copy())
                y_chunks.append(y_buf.copy())
                k = 0
        feat_chunks.append(buf[:k].copy())
        arm_chunks.append(arm_buf[:k].copy())
        y_chunks.append(y_buf[:k].copy())

    data = Dataset(np.concatenate(feat_chunks), np.concatenate(arm_chunks), np.concatenate(y_chunks))
    if len(data) == 0:
        raise ParseError(f"{path}: no data rows")
    return data, summarize(data)


def heterogeneity_summary(data: Dataset) -> list[dict]:
    """Difference-in-means ATE above vs at-or-below each feature's median."""
    out = []
    for j in range(data.dim):
        x = data.features[:, j]
        med = float(np.median(x))
        row = {"feature": f"f{j}", "median": med}
        for label, mask in (("high", x > med), ("low", x <= med)):
            sub = data.take(np.flatnonzero(mask))
            s = summarize(sub)
            row[f"ate_{label}"] = s.ate if 0 < s.treated_fraction < 1 else None
            row[f"n_{label}"] = s.n_rows
        hi, lo = row["ate_high"], row["ate_low"]
        row["ratio"] = hi / lo if hi is not None and lo not in (None, 0.0) else None
        out.append(row)
    return out


def synthesize_costs(
    n: int,
    seed: int,
    mu: float = COST_MU,
    sigma: float = COST_SIGMA,
    low: float = COST_MIN,
    high: float = COST_MAX,
) -> np.ndarray:
    """Log-normal per-user serving costs clipped to ``[low, high]``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = make_rng(seed)
    return np.clip(np.exp(mu + sigma * rng.standard_normal(n)), low, high)


def split_indices(n_rows: int, seed: int, eval_size: int, train_size: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation of ``range(n_rows)``; train is the first slice, eval the next."""
    if train_size < 0 or eval_size < 0:
        raise ValueError("sizes must be non-negative")
    if train_size + eval_size > n_rows:
        raise ValueError(f"train_size + eval_size = {train_size + eval_size} exceeds {n_rows} rows")
    perm = make_rng(seed).permutation(n_rows)
    return perm[:train_size], perm[train_size : train_size + eval_size]


def shuffle_split(data: Dataset, seed: int, eval_size: int, train_size: int = 0) -> tuple[Dataset, Dataset]:
    train_idx, eval_idx = split_indices(len(data), seed, eval_size, train_size)
    return data.take(train_idx), data.take(eval_idx)


TAU_FUNCTIONS = ("linear-in-x1", "step-in-x1", "zero")


@dataclass
class SyntheticEnvConfig:
    """Ground-truth environment. The effect depends on the first feature only.

    ``step-in-x1`` gives ``tau_scale`` when the first feature is positive and 0
    otherwise; ``linear-in-x1`` is ``tau_scale * clip(x, -3, 3) / 3``.
    """

    n_users: int = 200_000
    feature_dim: int = N_FEATURES
    base_rate: float = 0.0025
    tau_function: str = "step-in-x1"
    tau_scale: float = 0.0024
    treat_prob: float = 0.85
    cost_mu: float = COST_MU
    cost_sigma: float = COST_SIGMA
    cost_min: float = COST_MIN
    cost_max: float = COST_MAX
    seed: int = 0

    def validate(self) -> None:
        if self.tau_function not in TAU_FUNCTIONS:
            raise ValueError(f"tau_function must be one of {TAU_FUNCTIONS}, got {self.tau_function!r}")
        if self.n_users < 0 or self.feature_dim < 1:
            raise ValueError("n_users must be >= 0 and feature_dim >= 1")
        if not 0.0 <= self.treat_prob <= 1.0:
            raise ValueError("treat_prob must lie in [0, 1]")
        max_tau = 0.0 if self.tau_function == "zero" else abs(self.tau_scale)
        if self.base_rate + max_tau > 1.0 or self.base_rate - max_tau < 0.0:
            raise ValueError("base_rate +/- max|tau| must stay within [0, 1]")


def true_tau(config: SyntheticEnvConfig, features: np.ndarray) -> np.ndarray:
    x1 = features[:, 0]
    if config.tau_function == "zero":
        return np.zeros(features.shape[0])
    if config.tau_function == "step-in-x1":
        return np.where(x1 > 0, config.tau_scale, 0.0)
    return config.tau_scale * np.clip(x1, -3.0, 3.0) / 3.0


def generate_synthetic(config: SyntheticEnvConfig) -> tuple[Dataset, np.ndarray]:
    """Draw a logged randomized trial from a known environment; returns the data and true tau per user."""
    config.validate()
    rng = make_rng(config.seed)
    n, d = config.n_users, config.feature_dim
    x = rng.standard_normal((n, d))
    arm = (rng.random(n) < config.treat_prob).astype(np.int8)
    tau = true_tau(config, x)
    p = np.clip(config.base_rate + arm * tau, 0.0, 1.0)
    y = (rng.random(n) < p).astype(np.int8)
    cost_seed = int(rng.integers(2**63))
    cost = synthesize_costs(n, cost_seed, config.cost_mu, config.cost_sigma, config.cost_min, config.cost_max)
    return Dataset(x, arm, y, cost), tau
