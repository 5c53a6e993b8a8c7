"""Command-line entry points: run experiments, bounds-only sweeps, config lint.

Exit codes: 0 success, 2 configuration error, 3 partial solver failures.
"""

import argparse
import sys

from .harness import ExperimentSpec, load_spec, run_experiment


def _add_common(p):
    p.add_argument("config", help="experiment config file (INI or JSON)")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--trials", type=int, default=None,
                   help="override trial count")
    p.add_argument("--snr", default=None,
                   help="override SNR points, comma separated dB values")


def _load(args) -> ExperimentSpec:
    spec = load_spec(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    if args.out is not None:
        spec.output_dir = args.out
    if args.trials is not None:
        spec.trials = args.trials
    if args.snr is not None:
        spec.snr_points = tuple(float(s) for s in args.snr.split(","))
    return spec.validate()


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="risloc",
        description="RIS-aided ISAC localization/decoding benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured experiment sweep")
    _add_common(run_p)

    bcrb_p = sub.add_parser("bcrb", help="write bounds only, no solvers")
    _add_common(bcrb_p)

    val_p = sub.add_parser("validate", help="check a config file and exit")
    val_p.add_argument("config")

    args = parser.parse_args(argv)

    if args.command == "validate":
        try:
            spec = load_spec(args.config)
        except Exception as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        print(f"ok: {len(spec.snr_points)} SNR points, "
              f"{spec.trials} trials, solvers: {', '.join(spec.solvers) or '-'}")
        return 0

    try:
        spec = _load(args)
        if args.command == "bcrb":
            spec.solvers = ()
            spec.bcrb = True
            spec.validate()
    except Exception as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    summary = run_experiment(spec)
    print(f"wrote {summary['output_dir']}")
    if summary["partial_failures"]:
        print(f"{summary['partial_failures']} trial(s) failed", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
