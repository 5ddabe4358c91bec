"""Command line entry point.

Verbs: run, sweep, plot, validate. Exit codes: 0 success, 1 validation
error, 2 runtime failure. The output root comes from --output-root, else the
DESKRL_OUTPUT_ROOT environment variable, else the working directory.
"""

import argparse
import sys
from pathlib import Path

from .autodiff import ContractError
from .config import ConfigError, validate_config
from .harness import (_atomic_write_bytes, read_aggregate_csv, run_experiment,
                      sweep)
from .svgplot import render_curves


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="deskrl",
        description="Train and evaluate desk-scale RL agents; emit CSV/SVG artifacts.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run every seed of one config")
    p_run.add_argument("config")
    p_run.add_argument("--output-root", default=None)

    p_sweep = sub.add_parser("sweep", help="run a config across utd or variant values")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=("utd", "variant"))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values, e.g. 1,2,5,10")
    p_sweep.add_argument("--output-root", default=None)

    p_plot = sub.add_parser("plot", help="render aggregate CSVs into one SVG")
    p_plot.add_argument("csvs", nargs="+")
    p_plot.add_argument("-o", "--out", required=True)
    p_plot.add_argument("--labels", default=None,
                        help="comma-separated legend labels; default: file stems")
    p_plot.add_argument("--title", default="")

    p_val = sub.add_parser("validate", help="check a config and report every problem")
    p_val.add_argument("config")
    return parser


def _load_config(path):
    cfg, warnings = validate_config(path)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "validate":
            _load_config(args.config)
            print(f"{args.config}: OK")
            return 0

        if args.verb == "run":
            cfg = _load_config(args.config)
            result = run_experiment(cfg, root=args.output_root)
            for path in result["per_seed"]:
                print(path)
            print(result["aggregate"])
            return 0

        if args.verb == "sweep":
            cfg = _load_config(args.config)
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            if not values:
                print("error: --values is empty", file=sys.stderr)
                return 1
            result = sweep(cfg, args.axis, values, root=args.output_root)
            for sub_result in result["runs"]:
                print(sub_result["aggregate"])
            print(result["plot"])
            return 0

        # plot
        curves = [read_aggregate_csv(p) for p in args.csvs]
        if args.labels is not None:
            labels = [v.strip() for v in args.labels.split(",")]
        else:
            labels = [Path(p).stem for p in args.csvs]
        svg = render_curves(curves, labels, title=args.title)
        _atomic_write_bytes(Path(args.out), svg.encode("utf-8"))
        print(args.out)
        return 0

    except ConfigError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps to exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
