"""Command line entry point: ``netmorph <kind> --config <file>``."""

import argparse
import logging
import os
import sys

KINDS = (
    "simulate",
    "stationary-penalty",
    "stationary-variational",
    "oned-extinction",
    "oned-classify",
    "convergence-study",
    "mesh-gen",
)

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser():
    p = argparse.ArgumentParser(prog="netmorph", description="Transport network formation experiments.")
    p.add_argument("kind", choices=KINDS, help="experiment to run")
    p.add_argument("--config", required=True, help="INI experiment file (may be empty)")
    p.add_argument("--out", default=None, help="output directory (default: out/<kind>)")
    p.add_argument("--seed", type=int, default=None, help="overrides [experiment] seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("netmorph: error: --threads must be >= 1", file=sys.stderr)
        return 2
    # must happen before numpy loads its BLAS
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import io, runner

    try:
        cfg = io.load_config(args.config, kind=args.kind)
    except io.ConfigError as exc:
        print(f"netmorph: config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.values["experiment"]["seed"] = args.seed
    out = args.out or os.path.join("out", args.kind)
    try:
        summary = runner.run_experiment(cfg, out, threads=args.threads)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"netmorph: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"netmorph {args.kind}: wrote {out}")
    for key in sorted(summary):
        if not isinstance(summary[key], list):
            print(f"  {key} = {summary[key]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
