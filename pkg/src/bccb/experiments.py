"""Seeded multi-run experiments and result emission.

Each experiment expands into independent replay tasks (policy x cell x
seed). Tasks are run sequentially or fanned out over worker processes and
always merged in sorted key order, so emitted per-seed files do not depend
on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import __version__
from .data import SyntheticEnvConfig, generate_synthetic, load_criteo, split_indices, summarize, synthesize_costs
from .domain import DEFAULT_SEEDS, Dataset
from .hte_online import HteConfig
from .policies import POLICY_NAMES, FitFailure, PolicyConfig, make_policy, offline_uplift_fit
from .replay import RunMetrics, run_replay

log = logging.getLogger(__name__)

EXPERIMENTS = ("budget_sweep", "crossover", "scale", "synthetic_suite")
ONLINE_POLICIES = ("ts", "budgeted_ts", "hte_greedy", "bccb")
DEFAULT_BUDGETS = {"budget_sweep": (1000.0, 2000.0, 3000.0, 5000.0, 8000.0)}
DEFAULT_TRAIN_SIZES = (1000, 2000, 5000, 10000, 50000)
DEFAULT_SCALES = ("100000", "500000", "full")
FULL = "full"

# Config keys that never affect a decision and are left out of the hash.
_NON_DECISION_KEYS = {"out", "jobs", "trace", "figures"}

METRIC_COLUMNS = (
    "conversions",
    "control_conversions",
    "total_cost",
    "treatment_rate",
    "cost_per_conversion",
    "matched",
    "skipped",
    "streamed",
    "treated_matched",
)
CELL_COLUMNS = ("budget", "users", "train_size")
DISPLAY_ORDER = ("ts", "budgeted_ts", "hte_greedy", "bccb", "offline_uplift")


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; every field maps to one config-file key and CLI flag."""

    experiment: str = "budget_sweep"
    policies: list[str] = field(default_factory=lambda: list(ONLINE_POLICIES))
    budgets: list[float] | None = None
    users: int = 100_000
    scales: list[str] = field(default_factory=lambda: list(DEFAULT_SCALES))
    train_sizes: list[int] = field(default_factory=lambda: list(DEFAULT_TRAIN_SIZES))
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    data: str | None = None
    delimiter: str = ","
    # policy hyperparameters
    eta: float = 0.5
    lam: float = 0.001
    epsilon: float = 1e-6
    lr: float = 0.01
    l2: float = 1e-4
    warmup: int = 50
    warmup_prior: float = 0.002
    lambda_b: float = 0.0
    lambda_off: float = 0.001
    offline_epochs: int = 5
    offline_train_size: int = 50_000
    # stream construction
    cost_seed: int = 2024
    shuffle_seed: int | None = None
    # synthetic environment, used when no data file is given
    synth_users: int | None = None
    synth_dim: int = 12
    synth_base_rate: float = 0.0025
    synth_tau: str = "step-in-x1"
    synth_tau_scale: float = 0.0024
    synth_seed: int = 7
    # output
    out: str = "results"
    jobs: int = 1
    trace: bool = False
    figures: bool = False

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if not self.policies:
            raise ValueError("at least one policy is required")
        for p in self.policies:
            if p not in POLICY_NAMES:
                raise ValueError(f"unknown policy {p!r}; expected one of {', '.join(POLICY_NAMES)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.budgets is not None and not self.budgets:
            raise ValueError("at least one budget is required")
        if any(b < 0 for b in self.resolved_budgets()):
            raise ValueError("budgets must be non-negative")
        if self.users <= 0:
            raise ValueError("users must be positive")
        for s in self.scales:
            if s != FULL and int(s) <= 0:
                raise ValueError(f"bad scale {s!r}")
        self.policy_config()

    def resolved_budgets(self) -> list[float]:
        if self.budgets is not None:
            return [float(b) for b in self.budgets]
        return list(DEFAULT_BUDGETS.get(self.experiment, (5000.0,)))

    def policy_config(self) -> PolicyConfig:
        hte = HteConfig(learning_rate=self.lr, l2=self.l2, warmup_min=self.warmup, warmup_prior=self.warmup_prior)
        return PolicyConfig(
            eta=self.eta,
            lam=self.lam,
            epsilon=self.epsilon,
            lambda_b=self.lambda_b,
            lambda_off=self.lambda_off,
            offline_epochs=self.offline_epochs,
            hte=hte,
        )

    def synthetic_config(self, n_users: int) -> SyntheticEnvConfig:
        return SyntheticEnvConfig(
            n_users=n_users,
            feature_dim=self.synth_dim,
            base_rate=self.synth_base_rate,
            tau_function=self.synth_tau,
            tau_scale=self.synth_tau_scale,
            seed=self.synth_seed,
        )

    def to_flat(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, values: dict) -> ExperimentConfig:
        values = {_ALIASES.get(k, k): v for k, v in values.items()}
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: _coerce(k, v) for k, v in values.items()})

    def config_hash(self) -> str:
        decision = {k: v for k, v in self.to_flat().items() if k not in _NON_DECISION_KEYS}
        blob = json.dumps(decision, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_LIST_KEYS = {"policies": str, "budgets": float, "scales": str, "train_sizes": int, "seeds": int}
_INT_KEYS = {"users", "warmup", "offline_epochs", "offline_train_size", "cost_seed", "synth_dim", "synth_seed", "jobs"}
_OPT_INT_KEYS = {"shuffle_seed", "synth_users"}
_FLOAT_KEYS = {"eta", "lam", "epsilon", "lr", "l2", "warmup_prior", "lambda_b", "lambda_off", "synth_base_rate", "synth_tau_scale"}
_BOOL_KEYS = {"trace", "figures"}
_ALIASES = {"lambda": "lam", "lambda_offline": "lambda_off", "warmup_min": "warmup", "policy": "policies"}


def _coerce(key: str, value):
    """Turn config-file strings (or JSON values) into typed field values."""
    if value is None:
        return None
    if key in _LIST_KEYS:
        items = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
        return [_LIST_KEYS[key](str(v).strip()) for v in items]
    if key in _INT_KEYS:
        return int(value)
    if key in _OPT_INT_KEYS:
        return None if str(value).lower() in ("", "none", "null") else int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _BOOL_KEYS:
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    if key == "data":
        return None if str(value).lower() in ("", "none", "null") else str(value)
    return value


def read_config_file(path: str | Path) -> dict:
    """Read a flat config: JSON object (or a run manifest's ``config``) or ``key = value`` lines."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        obj = json.loads(text)
        return obj.get("config", obj)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return values


# -- data & streams -------------------------------------------------------------

_DATA: Dataset | None = None


def _stream_block(config: ExperimentConfig) -> int:
    """Rows reserved at the front of each permutation for offline training."""
    if config.experiment == "crossover":
        return max(config.train_sizes) if "offline_uplift" in config.policies else 0
    return config.offline_train_size if "offline_uplift" in config.policies else 0


def _required_rows(config: ExperimentConfig) -> int:
    block = _stream_block(config)
    if config.experiment == "scale":
        numeric = [int(s) for s in config.scales if s != FULL]
        return block + max(numeric or [config.users])
    return block + config.users


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.data:
        data, summary = load_criteo(config.data, config.delimiter)
        log.info("loaded %d rows from %s", summary.n_rows, config.data)
        return data
    n = config.synth_users or _required_rows(config)
    data, _ = generate_synthetic(config.synthetic_config(n))
    return data


def build_stream(data: Dataset, seed: int, users: int, block: int, cost_seed: int) -> tuple[Dataset, np.ndarray]:
    """Eval stream of ``users`` rows after the ``block`` training rows of the seed's permutation.

    Returns the stream and the training-row indices. Data without costs get
    synthesized costs by stream position, so every policy and every
    experiment sees the same cost at the same position.
    """
    train_idx, eval_idx = split_indices(len(data), seed, users, block)
    cost = synthesize_costs(users, cost_seed) if data.cost is None else None
    return data.take(eval_idx, cost), train_idx


# -- tasks -----------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Task:
    budget: float
    users: int
    train_size: int
    policy: str
    seed: int


@dataclass
class TaskResult:
    task: Task
    metrics: RunMetrics
    fit_failed: bool
    runtime: float


def _resolve_users(scale: str, block: int, n_rows: int) -> int:
    return n_rows - block if scale == FULL else int(scale)


def run_task(task: Task, config: ExperimentConfig, data: Dataset | None = None) -> TaskResult:
    data = data if data is not None else _DATA
    block = _stream_block(config)
    perm_seed = task.seed if config.shuffle_seed is None else config.shuffle_seed
    if block + task.users > len(data):
        raise ValueError(f"dataset has {len(data)} rows; need {block + task.users} for {task}")
    stream, train_idx = build_stream(data, perm_seed, task.users, block, config.cost_seed)
    pcfg = config.policy_config()
    offline_model = None
    if task.policy == "offline_uplift":
        train = data.take(train_idx[: task.train_size])
        offline_model = offline_uplift_fit(train, pcfg.offline_epochs, pcfg.hte, seed=task.seed)
        if isinstance(offline_model, FitFailure):
            log.info("offline fit failed for %s: %s", task, offline_model.reason)
    policy = make_policy(task.policy, stream.dim, task.seed, pcfg, offline_model)
    trace_fh = None
    if config.trace:
        trace_dir = Path(config.out) / "trace"
        trace_dir.mkdir(parents=True, exist_ok=True)
        name = f"{config.experiment}_{task.policy}_b{task.budget:g}_u{task.users}_t{task.train_size}_s{task.seed}.jsonl"
        trace_fh = open(trace_dir / name, "w")
    t0 = time.perf_counter()
    try:
        metrics = run_replay(stream, policy, task.budget, trace=trace_fh)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    runtime = time.perf_counter() - t0
    return TaskResult(task, metrics, isinstance(offline_model, FitFailure), runtime)


def _worker_init(config: ExperimentConfig) -> None:
    logging.basicConfig(level=logging.WARNING)


def _run_task_global(args):
    task, config = args
    return run_task(task, config)


def execute(tasks: list[Task], config: ExperimentConfig, data: Dataset) -> dict[Task, TaskResult]:
    global _DATA
    tasks = sorted(set(tasks))
    _DATA = data
    try:
        if config.jobs > 1 and len(tasks) > 1:
            # fork shares the dataset with workers without pickling it
            ctx = get_context("fork")
            with ProcessPoolExecutor(config.jobs, mp_context=ctx, initializer=_worker_init, initargs=(config,)) as pool:
                results = list(pool.map(_run_task_global, [(t, config) for t in tasks]))
        else:
            results = []
            for i, t in enumerate(tasks, 1):
                results.append(run_task(t, config, data))
                log.info("[%d/%d] %s conversions=%d", i, len(tasks), t, results[-1].metrics.conversions)
    finally:
        _DATA = None
    return {r.task: r for r in results}


# -- result tables ----------------------------------------------------------------


@dataclass
class ResultTable:
    experiment: str
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def aggregate(self) -> list[dict]:
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault(tuple(r[c] for c in CELL_COLUMNS) + (r["policy"],), []).append(r)
        out = []
        for key in sorted(groups, key=_sort_key):
            rs = groups[key]
            agg = dict(zip(CELL_COLUMNS + ("policy",), key))
            agg["n_seeds"] = len(rs)
            for col in ("conversions", "total_cost", "treatment_rate", "matched"):
                mean, std = mean_std([float(r[col]) for r in rs])
                agg[f"{col}_mean"] = mean
                agg[f"{col}_std"] = std
            cpc = [r["cost_per_conversion"] for r in rs if r["cost_per_conversion"] is not None]
            agg["cost_per_conversion_mean"] = float(np.mean(cpc)) if cpc else None
            mean = agg["conversions_mean"]
            agg["conversions_cov"] = agg["conversions_std"] / mean if mean > 0 else None
            agg["fit_failures"] = sum(int(r["fit_failed"]) for r in rs)
            out.append(agg)
        return out

    def check_consistency(self, tol: float = 1e-9) -> None:
        """Recompute every aggregate mean/std from the per-seed rows."""
        for agg in self.aggregate():
            rs = [
                r
                for r in self.rows
                if all(r[c] == agg[c] for c in CELL_COLUMNS) and r["policy"] == agg["policy"]
            ]
            vals = np.array([r["conversions"] for r in rs], dtype=float)
            if abs(vals.mean() - agg["conversions_mean"]) > tol or abs(vals.std() - agg["conversions_std"]) > tol:
                raise AssertionError(f"aggregate mismatch for {agg}")


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation (ddof = 0)."""
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


def _sort_key(key: tuple) -> tuple:
    budget, users, train_size, policy = key
    order = DISPLAY_ORDER.index(policy) if policy in DISPLAY_ORDER else len(DISPLAY_ORDER)
    return (budget, users, train_size, order, policy)


def _row(experiment: str, task: Task, res: TaskResult, train_size: int | None = None) -> dict:
    row = {
        "experiment": experiment,
        "budget": task.budget,
        "users": task.users,
        "train_size": task.train_size if train_size is None else train_size,
        "policy": task.policy,
        "seed": task.seed,
    }
    m = res.metrics
    row.update({c: getattr(m, c) for c in METRIC_COLUMNS})
    row["fit_failed"] = res.fit_failed
    return row


def _sorted_rows(rows: list[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: _sort_key((r["budget"], r["users"], r["train_size"], r["policy"])) + (r["seed"],))


def _meta(config: ExperimentConfig, results: dict[Task, TaskResult], data: Dataset) -> dict:
    return {
        "dataset": asdict(summarize(data)),
        "runtimes": [
            {**asdict(t), "seconds": round(r.runtime, 3)} for t, r in sorted(results.items())
        ],
    }


def _offline_train_size(config: ExperimentConfig) -> int:
    return config.offline_train_size if "offline_uplift" in config.policies else 0


def run_budget_sweep(config: ExperimentConfig, data: Dataset) -> ResultTable:
    """One replay per (policy, budget, seed) on the first ``users`` streamed users."""
    ts = _offline_train_size(config)
    tasks = [
        Task(b, config.users, ts if p == "offline_uplift" else 0, p, s)
        for b in config.resolved_budgets()
        for p in config.policies
        for s in config.seeds
    ]
    results = execute(tasks, config, data)
    rows = _sorted_rows([_row("budget_sweep", t, r) for t, r in results.items()])
    return ResultTable("budget_sweep", rows, _meta(config, results, data))


def run_crossover(config: ExperimentConfig, data: Dataset) -> ResultTable:
    """Offline uplift trained on growing history vs online policies on the same held-out stream.

    The evaluation stream depends only on the seed: it follows a block of
    ``max(train_sizes)`` rows, and each training set is a prefix of that
    block. Online policies never see the training rows, so they are run
    once per (budget, seed) and reported under every training size.
    """
    budget_rows = []
    tasks = []
    for b in config.resolved_budgets():
        for s in config.seeds:
            for p in config.policies:
                if p == "offline_uplift":
                    tasks.extend(Task(b, config.users, n, p, s) for n in config.train_sizes)
                else:
                    tasks.append(Task(b, config.users, 0, p, s))
    results = execute(tasks, config, data)
    for t, r in results.items():
        if t.policy == "offline_uplift":
            budget_rows.append(_row("crossover", t, r))
        else:
            budget_rows.extend(_row("crossover", t, r, train_size=n) for n in config.train_sizes)
    return ResultTable("crossover", _sorted_rows(budget_rows), _meta(config, results, data))


def run_scale(config: ExperimentConfig, data: Dataset) -> ResultTable:
    """One replay per (policy, stream size, seed); the pacing horizon equals the stream size."""
    block = _stream_block(config)
    ts = _offline_train_size(config)
    tasks = [
        Task(b, _resolve_users(sc, block, len(data)), ts if p == "offline_uplift" else 0, p, s)
        for b in config.resolved_budgets()
        for sc in config.scales
        for p in config.policies
        for s in config.seeds
    ]
    results = execute(tasks, config, data)
    rows = _sorted_rows([_row("scale", t, r) for t, r in results.items()])
    return ResultTable("scale", rows, _meta(config, results, data))


# -- emission ----------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _wide_table(agg: list[dict], column_key: str, value_fmt) -> list[dict]:
    """Pivot aggregates into one row per policy with one column per cell value."""
    policies = [p for p in DISPLAY_ORDER if any(a["policy"] == p for a in agg)]
    cols = sorted({a[column_key] for a in agg})
    out = []
    for p in policies:
        row = {"policy": p}
        for c in cols:
            match = [a for a in agg if a["policy"] == p and a[column_key] == c]
            row[f"{column_key}={_fmt(c)}"] = value_fmt(match[0]) if match else None
        out.append(row)
    return out


def plot_data(table: ResultTable) -> dict[str, list[dict]]:
    """Plot-ready series keyed by output file name."""
    agg = table.aggregate()
    pick = lambda a, *keys: {k: a[k] for k in keys}  # noqa: E731
    if table.experiment == "budget_sweep":
        return {"figure1a_conversions_vs_budget.csv": [pick(a, "policy", "budget", "conversions_mean", "conversions_std") for a in agg]}
    if table.experiment == "scale":
        return {"figure1b_conversions_vs_scale.csv": [pick(a, "policy", "users", "conversions_mean", "conversions_std") for a in agg]}
    if table.experiment == "crossover":
        return {
            "figure2a_crossover.csv": [pick(a, "policy", "train_size", "conversions_mean", "conversions_std") for a in agg],
            "figure2b_cov.csv": [pick(a, "policy", "train_size", "conversions_cov") for a in agg],
        }
    return {}


def _mean_pm_std(a: dict) -> str:
    return f"{a['conversions_mean']:.1f} ± {a['conversions_std']:.1f}"


def summary_tables(table: ResultTable) -> dict[str, list[dict]]:
    agg = table.aggregate()
    if table.experiment == "budget_sweep":
        return {"table1_budget_sweep.csv": _wide_table(agg, "budget", _mean_pm_std)}
    if table.experiment == "scale":
        return {"table3_scale.csv": _wide_table(agg, "users", _mean_pm_std)}
    if table.experiment == "crossover":
        sizes = sorted({a["train_size"] for a in agg})
        policies = [p for p in DISPLAY_ORDER if any(a["policy"] == p for a in agg)]
        rows = []
        for n in sizes:
            row = {"train_size": n}
            for p in policies:
                match = [a for a in agg if a["policy"] == p and a["train_size"] == n]
                row[p] = _mean_pm_std(match[0]) if match else None
            rows.append(row)
        return {"table2_crossover.csv": rows}
    return {}


def emit_results(table: ResultTable, config: ExperimentConfig, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Write per-seed and aggregate CSVs, table/plot-data CSVs and a JSON run manifest."""
    out = Path(out_dir or config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    table.check_consistency()
    prefix = table.experiment
    files: dict[str, Path] = {}

    files["per_seed"] = out / f"{prefix}_per_seed.csv"
    write_csv(files["per_seed"], table.rows, ["experiment", *CELL_COLUMNS, "policy", "seed", *METRIC_COLUMNS, "fit_failed"])
    files["aggregate"] = out / f"{prefix}_aggregate.csv"
    write_csv(files["aggregate"], table.aggregate())
    for name, rows in {**summary_tables(table), **plot_data(table)}.items():
        files[name] = out / name
        write_csv(files[name], rows)

    if config.figures:
        from .plotting import render_figures

        for name, path in render_figures(table, out).items():
            files[name] = path

    manifest = {
        "experiment": table.experiment,
        "config": config.to_flat(),
        "config_hash": config.config_hash(),
        "seeds": list(config.seeds),
        "versions": {"bccb": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "files": {k: p.name for k, p in files.items()},
        **table.meta,
    }
    files["manifest"] = out / f"{prefix}_manifest.json"
    files["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return files


RUNNERS = {"budget_sweep": run_budget_sweep, "crossover": run_crossover, "scale": run_scale}
