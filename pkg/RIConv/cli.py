"""
Command-line entry point: train, eval, audit, ablate, gen-data and gradcheck.

Every ``RunConfig`` key can be set in a ``key=value`` file passed with
``--config`` and overridden by a flag of the same name (``--lr 0.005``).

Exit codes: 0 success, 2 audit failure, 3 configuration error, 4 runtime
error or non-finite values.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from .core.autodiff import NonFiniteError
from .core.config.run_config import ConfigError, RunConfig
from .core.data import save_dataset, synth_shapes
from .core.network import build, load_checkpoint
from .core.training import (
    evaluate_checkpoint,
    load_datasets,
    run_ablation,
    run_omega_sweep,
    train_model,
)
from .core.utils.logging_config import configure_package_logging, get_logger
from .core.utils.timing import TimingContext
from .core.verify import AuditBudget, gradient_audit, run_audit_suite, suite_passed, write_reports

EXIT_OK = 0
EXIT_AUDIT_FAILED = 2
EXIT_CONFIG_ERROR = 3
EXIT_RUNTIME_ERROR = 4

logger = get_logger(__name__)


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    group = parser.add_argument_group("configuration overrides")
    for key in RunConfig.model_fields:
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        group.add_argument(*flags, dest=key, type=str, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riconv", description="Rotation-invariant point convolutions with LRFs."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train a model and write metrics.csv")
    _add_config_flags(train)

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint under a test scenario")
    _add_config_flags(evaluate)
    evaluate.add_argument("--checkpoint", type=str, required=True)
    evaluate.add_argument("--scenario", type=str, default=None,
                          help="Test rotation: N/none, z or A/so3")

    audit = commands.add_parser("audit", help="Run the invariance and oracle audit suite")
    _add_config_flags(audit)
    audit.add_argument("--checkpoint", type=str, default=None)
    audit.add_argument("--checks", type=str, default=None,
                       help="Comma-separated subset of checks")

    ablate = commands.add_parser("ablate", help="Train and compare the ablation variants")
    _add_config_flags(ablate)
    ablate.add_argument("--with-sweep", dest="sweep", action="store_true",
                        help="Also train the full variant for every omega_sweep value")

    gen = commands.add_parser("gen-data", help="Write the synthetic dataset as XYZ files")
    _add_config_flags(gen)
    gen.add_argument("--out", type=str, default=None, help="Target directory")

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference gradient check")
    _add_config_flags(gradcheck)
    gradcheck.add_argument("--max-entries", type=int, default=None,
                           help="Sample at most this many entries per parameter")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key) for key in RunConfig.model_fields}
    if getattr(args, "scenario", None):
        overrides["test_rotation"] = args.scenario
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig.from_environment(**overrides)


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    _, history = train_model(config)
    final = history.iloc[-1].to_dict()
    print(", ".join(f"{k}={v:.6g}" for k, v in final.items()))
    print(f"checkpoints written to {config.output_dir}")
    return EXIT_OK


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    result = evaluate_checkpoint(config, Path(args.checkpoint))
    print(f"scenario={config.train_rotation}/{config.test_rotation} "
          f"{result.metric}={result.value:.6f}")
    return EXIT_OK


def cmd_audit(config: RunConfig, args: argparse.Namespace) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, cache_dir=config.cache_dir)
    else:
        num_classes = 16 if config.task == "segment" else 8
        model = build(config.architecture(num_classes), config.seed, cache_dir=config.cache_dir)
    budget = AuditBudget(
        rotations=config.audit_rotations,
        trials=config.audit_trials,
        network_clouds=config.network_audit_clouds,
        network_rotations=config.network_audit_rotations,
        parallelism=config.parallelism,
        seed=config.seed,
    )
    checks = args.checks.split(",") if args.checks else None
    reports = run_audit_suite(model, budget, checks=checks)
    for report in reports:
        print(report.to_line())
    write_reports(reports, Path(config.output_dir) / "audit.csv")
    return EXIT_OK if suite_passed(reports) else EXIT_AUDIT_FAILED


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> int:
    datasets = load_datasets(config)
    table = run_ablation(config, datasets, audit_clouds=config.network_audit_clouds)
    print(table.to_string(index=False))
    if args.sweep:
        print(run_omega_sweep(config, datasets).to_string(index=False))
    return EXIT_OK


def cmd_gen_data(config: RunConfig, args: argparse.Namespace) -> int:
    out = Path(args.out or Path(config.output_dir) / "data")
    for split, count, seed in (
        ("train", config.n_per_class, config.seed),
        ("test", config.n_test_per_class, config.seed + 1),
    ):
        dataset = synth_shapes(count, config.points_per_shape, seed, split=split,
                               parallelism=config.parallelism)
        print(f"wrote {save_dataset(dataset, out)}")
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace) -> int:
    report = gradient_audit(config.seed, args.max_entries, config.cache_dir)
    print(report.to_line())
    return EXIT_OK if report.ok else EXIT_AUDIT_FAILED


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "ablate": cmd_ablate,
    "gen-data": cmd_gen_data,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_package_logging()
    get_logger("RIConv.core.training")
    get_logger("RIConv.core.verify")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    try:
        with TimingContext(f"riconv {args.command}", logger):
            return COMMANDS[args.command](config, args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NonFiniteError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR
    except Exception as e:
        logger.exception(f"riconv {args.command} failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
