import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .api import ExperimentOutcome, Workbench
from .errors import ConfigError, FedlocError
from .scenario import AGGREGATORS, BASELINE_AGGREGATOR, ScenarioOverrides, parse_seeds

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

_EXPERIMENTS = {
    "run": ("Run one federated scenario", Workbench.run),
    "sweep-h": ("Sweep the FedHIL H parameter", Workbench.sweep_h),
    "compare": ("Compare fedavg, fedsgd, fedhil and a frozen GM on paired seeds", Workbench.compare),
    "skew": ("Run the five device-skew client mixes", Workbench.skew),
    "scale": ("Run with 6, 12 and 18 clients", Workbench.scale),
    "noise": ("Per-RP error traces per aggregator under injected noise", Workbench.noise),
    "ablate-sae": ("Compare no, traditional and layer-wise SAE augmentation", Workbench.ablate_sae),
}


def _scenario_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Scenario JSON document")
    common.add_argument("--out", help="Output directory (default: output_dir from tool config)")
    common.add_argument("--seeds", help="Comma-separated seeds, overriding the scenario and FEDLOC_SEED")
    common.add_argument("--jobs", type=int, help="Worker threads for independent (seed, building) runs")
    common.add_argument("--aggregator", choices=(*AGGREGATORS, BASELINE_AGGREGATOR), help="Override the aggregator")
    common.add_argument("--h", type=float, dest="h_percent", help="Override the FedHIL H percentage")
    common.add_argument("--rounds", type=int, help="Override the number of federation rounds")
    common.add_argument(
        "--literal-sum",
        "--eq10-literal",
        dest="literal_sum",
        action="store_true",
        help="Aggregate FedHIL updates as mean(dense W_high) + GM instead of the per-index mean",
    )
    common.add_argument("--training-device", help="Override the device the GM is pretrained with")
    return common


def _verbosity_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_mutually_exclusive_group()
    group.add_argument("-v", "--verbose", action="count", default=0, help="Show progress (-vv for debug output)")
    group.add_argument("-q", "--quiet", action="store_true", help="Only report errors")
    return common


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    parser = argparse.ArgumentParser(
        prog="fedloc",
        description="Federated indoor-localization workbench for heterogeneous Wi-Fi RSS clients.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    scenario_flags = _scenario_flags()
    verbosity = _verbosity_flags()

    subparsers.add_parser(
        "gen-data",
        parents=[scenario_flags, verbosity],
        help="Write offline and online fingerprint CSVs for every seed and building",
    )
    subparsers.add_parser(
        "pretrain",
        parents=[scenario_flags, verbosity],
        help="Train and checkpoint the global model (and SAE) per seed and building",
    )
    for name, (help_text, _) in _EXPERIMENTS.items():
        subparsers.add_parser(name, parents=[scenario_flags, verbosity], help=help_text)

    report_parser = subparsers.add_parser(
        "report", parents=[verbosity], help="Emit plot-ready tables from a results directory"
    )
    report_parser.add_argument("results_dir", help="Directory containing manifest.json")
    return parser


def _configure_logging(args: argparse.Namespace, default_level: str) -> None:
    if getattr(args, "quiet", False):
        level = logging.ERROR
    elif getattr(args, "verbose", 0) >= 2:
        level = logging.DEBUG
    elif getattr(args, "verbose", 0) == 1:
        level = logging.INFO
    else:
        level = getattr(logging, default_level, logging.WARNING)
    logger = logging.getLogger("fedloc")
    logger.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[fedloc] %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False


def _overrides(args: argparse.Namespace) -> ScenarioOverrides:
    if args.rounds is not None and args.rounds < 1:
        raise ConfigError(f"--rounds must be >= 1, got {args.rounds}")
    return ScenarioOverrides(
        seeds=parse_seeds(args.seeds) if args.seeds else None,
        aggregator=args.aggregator,
        h=args.h_percent,
        rounds=args.rounds,
        literal_sum=args.literal_sum,
        training_device=args.training_device,
    )


def _print_outcome(outcome: ExperimentOutcome) -> None:
    for variant, result in outcome.results.items():
        summary = result.summary
        print(
            f"[fedloc] {variant}: mean error {summary['mean_error_m']:.3f} m, "
            f"final round {summary['final_round_error_m']:.3f} m, "
            f"{summary['mean_bytes_per_round']:.0f} bytes/round"
        )
    if outcome.sweep is not None:
        print("h,mean_error_m,mean_latency_s")
        for row in outcome.sweep.rows:
            print(f"{row.h:g},{row.mean_error_m:.4f},{row.mean_latency_s:.4f}")
    print(f"[fedloc] wrote {len(outcome.artifacts)} artifacts to {outcome.out_dir}")


def _dispatch(args: argparse.Namespace, bench: Workbench) -> int:
    if args.command == "report":
        bundle = bench.report(Path(args.results_dir))
        print(f"[fedloc] report: {len(bundle.artifacts)} files in {bundle.report_dir}")
        return EXIT_OK

    config_path = Path(args.config)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    overrides = _overrides(args)
    out = Path(args.out) if args.out else None

    if args.command == "gen-data":
        for summary in bench.gen_data(config_path, out=out, overrides=overrides):
            print(
                f"[fedloc] {summary.building_id}: {summary.rp_count} RPs, {summary.ap_count} APs, "
                f"{summary.offline_samples} offline / {summary.online_samples} online fingerprints"
            )
        return EXIT_OK
    if args.command == "pretrain":
        for entry in bench.pretrain(config_path, out=out, overrides=overrides):
            print(
                f"[fedloc] {entry.building_id} seed {entry.seed}: offline accuracy {entry.offline_accuracy:.3f}, "
                f"checkpoint {entry.checkpoint}"
            )
        return EXIT_OK

    _, method = _EXPERIMENTS[args.command]
    _print_outcome(method(bench, config_path, out=out, overrides=overrides))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    bench = Workbench(Path.cwd(), jobs=getattr(args, "jobs", None))
    _configure_logging(args, bench.config.log_level)
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("[fedloc] error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return _dispatch(args, bench)
    except ConfigError as exc:
        print(f"[fedloc] error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedlocError as exc:
        print(f"[fedloc] error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
