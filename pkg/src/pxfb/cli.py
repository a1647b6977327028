"""Command line entry point: ``pxfb run | verify | plot``.

Exit codes: 0 success, 2 invalid configuration or parameters, 3 solver
nonconvergence, 4 certification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_CERTIFICATION = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pxfb", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override the configuration seed")
    parser.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    parser.add_argument("--out", default=None, help="output root directory (overrides the config)")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment from a TOML or JSON config")
    run.add_argument("config")
    run.add_argument("--no-plots", action="store_true", help="skip SVG output")
    verify = sub.add_parser("verify", help="replay a run and re-check its certificates")
    verify.add_argument("run_dir")
    plot = sub.add_parser("plot", help="(re)draw the plots of a run directory")
    plot.add_argument("run_dir")
    return parser


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise SystemExit("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # thread variables only take effect if set before numpy loads
    _set_threads(args.threads)

    from .errors import ConfigError, DomainError, NonConvergenceError
    from .experiments import load_config, run_experiment, verify_run

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            record = run_experiment(cfg, out=args.out, plots=not args.no_plots)
            print(f"run directory: {record.directory}")
            print(json.dumps(record.summary, sort_keys=True))
            for note in record.notes:
                print(f"note: {note}")
            if record.summary.get("passed") is False:
                return EXIT_CERTIFICATION
            return EXIT_OK
        if args.command == "verify":
            ok, msgs = verify_run(args.run_dir)
            for m in msgs:
                print(m)
            return EXIT_OK if ok else EXIT_CERTIFICATION
        if args.command == "plot":
            from .plotting import emit_plots

            run_dir = Path(args.run_dir)
            kind = json.loads((run_dir / "config.json").read_text())["kind"]
            paths, notes = emit_plots(run_dir, kind)
            for p in paths:
                print(run_dir / p)
            for note in notes:
                print(f"note: {note}")
            return EXIT_OK
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"error: solver did not converge: {exc} (residual {exc.residual:.3e})", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
