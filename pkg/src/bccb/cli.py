"""Command-line entry point: ``bccb {sweep,crossover,scale,synthetic,summary}``.

Precedence is defaults < ``--config`` file < explicit flags. Exit codes:
0 success, 1 usage or I/O error, 2 synthetic property failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import heterogeneity_summary, load_criteo
from .experiments import RUNNERS, ExperimentConfig, emit_results, load_dataset, read_config_file

EXIT_OK, EXIT_USAGE, EXIT_PROPERTY = 0, 1, 2

SUBCOMMANDS = {
    "sweep": "budget_sweep",
    "crossover": "crossover",
    "scale": "scale",
    "synthetic": "synthetic_suite",
}
DEFAULT_POLICIES = {
    "budget_sweep": ["ts", "budgeted_ts", "hte_greedy", "bccb"],
    "scale": ["ts", "budgeted_ts", "hte_greedy", "bccb"],
    "crossover": ["offline_uplift", "bccb"],
    "synthetic_suite": ["ts", "budgeted_ts", "hte_greedy", "bccb", "offline_uplift"],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(v.strip()) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


# flag -> config key; every flag defaults to None so unset flags never override the config file
_FLAG_KEYS = {
    "data": "data",
    "delimiter": "delimiter",
    "users": "users",
    "budgets": "budgets",
    "scales": "scales",
    "train_sizes": "train_sizes",
    "seeds": "seeds",
    "policy": "policies",
    "eta": "eta",
    "lam": "lam",
    "epsilon": "epsilon",
    "lr": "lr",
    "l2": "l2",
    "warmup": "warmup",
    "warmup_prior": "warmup_prior",
    "lambda_b": "lambda_b",
    "lambda_off": "lambda_off",
    "offline_epochs": "offline_epochs",
    "offline_train_size": "offline_train_size",
    "cost_seed": "cost_seed",
    "shuffle_seed": "shuffle_seed",
    "synth_users": "synth_users",
    "synth_dim": "synth_dim",
    "synth_base_rate": "synth_base_rate",
    "synth_tau": "synth_tau",
    "synth_tau_scale": "synth_tau_scale",
    "synth_seed": "synth_seed",
    "out": "out",
    "jobs": "jobs",
    "trace": "trace",
    "figures": "figures",
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--config", help="flat config file (key = value lines, or JSON / a run manifest)")
    g.add_argument("--data", help="Criteo-style CSV (.csv or .csv.gz); synthetic environment if omitted")
    g.add_argument("--delimiter", help="field delimiter of --data (default ',')")
    g.add_argument("--users", type=int, help="users streamed per run (default 100000)")
    g.add_argument("--budget", "--budgets", dest="budgets", type=_csv(float), help="comma-separated budgets")
    g.add_argument("--scale", "--scales", dest="scales", type=_csv(str), help="stream sizes for `scale`, e.g. 100000,500000,full")
    g.add_argument("--train-sizes", type=_csv(int), help="offline training sizes for `crossover`")
    g.add_argument("--seeds", type=_csv(int), help="comma-separated seeds (default 42,123,456)")
    g.add_argument("--policy", "--policies", dest="policy", type=_csv(str), help="comma-separated policy names")
    g.add_argument("--cost-seed", type=int, help="seed of the synthesized cost vector")
    g.add_argument("--shuffle-seed", type=int, help="fix the stream permutation across seeds")
    g.add_argument("--offline-train-size", type=int, help="training rows for offline_uplift in sweep/scale")

    h = p.add_argument_group("hyperparameters")
    h.add_argument("--eta", type=float, help="exploration weight (default 0.5)")
    h.add_argument("--lambda", dest="lam", type=float, help="BCCB base threshold (default 0.001)")
    h.add_argument("--epsilon", type=float, help="pace floor (default 1e-6)")
    h.add_argument("--lr", type=float, help="SGD learning rate (default 0.01)")
    h.add_argument("--l2", type=float, help="L2 penalty (default 1e-4)")
    h.add_argument("--warmup", type=int, help="per-arm observations before the HTE models are used (default 50)")
    h.add_argument("--warmup-prior", type=float, help="effect assumed during warm-up (default 0.002)")
    h.add_argument("--lambda-b", type=float, help="budgeted TS base margin (default 0)")
    h.add_argument("--lambda-off", type=float, help="offline uplift per-dollar cut-off (default 0.001)")
    h.add_argument("--offline-epochs", type=int, help="offline SGD epochs (default 5)")

    s = p.add_argument_group("synthetic environment")
    s.add_argument("--synth-users", type=int)
    s.add_argument("--synth-dim", type=int)
    s.add_argument("--synth-base-rate", type=float)
    s.add_argument("--synth-tau", choices=["linear-in-x1", "step-in-x1", "zero"])
    s.add_argument("--synth-tau-scale", type=float)
    s.add_argument("--synth-seed", type=int)

    o = p.add_argument_group("output")
    o.add_argument("--out", help="output directory (default ./results)")
    o.add_argument("--jobs", type=int, help="worker processes (default 1)")
    o.add_argument("--trace", action="store_const", const=True, help="write per-round JSONL traces")
    o.add_argument("--figures", action="store_const", const=True, help="also render PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bccb", description="Budget-constrained causal bandit experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (
        ("sweep", "online policies across budgets"),
        ("crossover", "offline uplift vs BCCB across training-set sizes"),
        ("scale", "online policies across stream sizes"),
        ("synthetic", "property checks on ground-truth environments"),
    ):
        _add_experiment_flags(sub.add_parser(name, help=help_))
    sp = sub.add_parser("summary", help="dataset summary as JSON")
    sp.add_argument("--data", required=True)
    sp.add_argument("--delimiter", default=",")
    sp.add_argument("--heterogeneity", action="store_true", help="add per-feature median-split ATE ratios")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    experiment = SUBCOMMANDS[args.command]
    values: dict = {"experiment": experiment, "policies": DEFAULT_POLICIES[experiment]}
    if args.config:
        from_file = read_config_file(args.config)
        from_file.pop("experiment", None)
        values.update(from_file)
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    config = ExperimentConfig.from_flat(values)
    config.validate()
    return config


def _run_summary(args) -> int:
    data, summary = load_criteo(args.data, args.delimiter)
    out = json.loads(summary.to_json())
    if args.heterogeneity:
        out["heterogeneity"] = heterogeneity_summary(data)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _run_experiment(config: ExperimentConfig) -> int:
    if config.experiment == "synthetic_suite":
        from .synthetic_suite import emit_suite, run_synthetic_suite

        results = run_synthetic_suite(config)
        emit_suite(results, config)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.statistic:.4g}  ({r.threshold})  {r.detail}")
        failed = [r.name for r in results if not r.passed]
        if failed:
            print(f"failed properties: {', '.join(failed)}", file=sys.stderr)
            return EXIT_PROPERTY
        return EXIT_OK

    data = load_dataset(config)
    table = RUNNERS[config.experiment](config, data)
    files = emit_results(table, config)
    for agg in table.aggregate():
        cell = ", ".join(f"{k}={agg[k]:g}" for k in ("budget", "users", "train_size"))
        print(f"{agg['policy']:<15} {cell:<40} conversions {agg['conversions_mean']:.1f} ± {agg['conversions_std']:.1f}")
    print(f"wrote {len(files)} files to {config.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        if args.command == "summary":
            return _run_summary(args)
        return _run_experiment(resolve_config(args))
    except UsageError as exc:
        print(f"bccb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"bccb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
