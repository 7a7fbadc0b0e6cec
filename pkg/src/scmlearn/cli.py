"""Command line entry points.

    scmlearn validate --config cfg.json
    scmlearn run --config cfg.json [--output-dir out] [--seed N]
                 [--policy NAME ...] [--trials N]
    scmlearn summarize --trace out/trace.csv [--output out/summary.csv]

Exit codes: 0 on success, 1 for configuration errors, 2 for runtime errors.
The default output directory can also be set via $SCMLEARN_OUTPUT_DIR.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    load_config,
    read_trace_csv,
    resolve_output_dir,
    run_experiment,
    summarize,
    validate_config,
    write_summary_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scmlearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write trace/summary CSVs")
    run.add_argument("--config", required=True, help="path to the JSON config")
    run.add_argument("--output-dir", default=None, help="directory for the CSV outputs")
    run.add_argument("--seed", type=int, default=None, help="override run.seed")
    run.add_argument(
        "--policy", action="append", default=None, help="override policies (repeatable)"
    )
    run.add_argument("--trials", type=int, default=None, help="override run.trials")

    val = sub.add_parser("validate", help="check a config without running anything")
    val.add_argument("--config", required=True, help="path to the JSON config")

    summ = sub.add_parser("summarize", help="aggregate a trace CSV into per-policy curves")
    summ.add_argument("--trace", required=True, help="path to a trace CSV")
    summ.add_argument("--output", default=None, help="summary CSV path (default: stdout)")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    run_cfg = cfg.run
    if args.seed is not None:
        run_cfg = dataclasses.replace(run_cfg, seed=args.seed)
    if args.trials is not None:
        run_cfg = dataclasses.replace(run_cfg, trials=args.trials)
    cfg = dataclasses.replace(cfg, run=run_cfg)
    if args.policy:
        cfg = dataclasses.replace(cfg, policy_names=tuple(args.policy))
        validate_config(cfg)  # overrides can break policy/graph compatibility
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            summary = validate_config(load_config(args.config))
            print(
                "config ok: {nodes} nodes, {candidates} candidates, policies {policies}, "
                "{trials} trials x {steps} steps".format(**summary)
            )
            return EXIT_OK

        if args.command == "run":
            cfg = _apply_overrides(load_config(args.config), args)
            out_dir = resolve_output_dir(cfg, args.output_dir)
            result = run_experiment(cfg, output_dir=out_dir)
            print(f"wrote {result.trace_path} and {result.summary_path}")
            if result.failures:
                for failure in result.failures:
                    print(f"trial failed: {failure}", file=sys.stderr)
                return EXIT_RUNTIME
            return EXIT_OK

        if args.command == "summarize":
            rows = summarize(read_trace_csv(args.trace))
            if args.output is None:
                from .harness import SUMMARY_COLUMNS, _format_cell

                print(",".join(SUMMARY_COLUMNS))
                for row in rows:
                    print(",".join(_format_cell(getattr(row, c)) for c in SUMMARY_COLUMNS))
            else:
                write_summary_csv(rows, Path(args.output))
                print(f"wrote {args.output}")
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
