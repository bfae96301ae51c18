"""Command-line entry point.

Subcommands: train, eval, bench, diag.  Exit codes: 0 success, 2 config
error, 3 data error, 4 diverged run.  ``--threads`` caps the BLAS thread
pools and must act before numpy loads, so the numeric modules are
imported lazily inside the handlers.  ``KRONRNN_OUT_DIR`` overrides the
default output directory; an explicit --out-dir beats both.
"""

import argparse
import json
import os
import sys

ENV_OUT_DIR = "KRONRNN_OUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _apply_threads(threads):
    explicit = threads is not None
    if not explicit:
        threads = 1     # deterministic by default
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        if explicit:
            os.environ[var] = str(threads)
        else:
            os.environ.setdefault(var, str(threads))


def _resolve_out_dir(args, cfg_out_dir, default):
    if args.out_dir:
        return args.out_dir
    if os.environ.get(ENV_OUT_DIR):
        return os.environ[ENV_OUT_DIR]
    return cfg_out_dir or default


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kronrnn",
        description="Kronecker-factored recurrent networks: train, eval, "
                    "bench, diag")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (default 1, deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("config", help="path to config JSON")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out-dir", default=None)
    p_train.add_argument("--resume", default=None,
                         help="checkpoint directory to resume from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint", help="checkpoint directory")
    p_eval.add_argument("config", help="path to config JSON")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out-dir", default=None)

    p_bench = sub.add_parser("bench",
                             help="time dense vs Kronecker application")
    p_bench.add_argument("--sizes", default="256,512,1024,2048",
                         help="comma-separated hidden sizes")
    p_bench.add_argument("--modes", default="dense,kron")
    p_bench.add_argument("--batch", type=int, default=32)
    p_bench.add_argument("--reps", type=int, default=20)
    p_bench.add_argument("--field", default="complex",
                         choices=("real", "complex"))
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out-dir", default=None)

    p_diag = sub.add_parser("diag", help="spectral report / amplitude sweep")
    p_diag.add_argument("source", help="checkpoint directory or config JSON")
    p_diag.add_argument("--sweep", default=None,
                        help="comma-separated penalty amplitudes")
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.add_argument("--out-dir", default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)

    from .errors import (CheckpointError, ConfigError, DataError,
                         DivergenceError)
    try:
        return _dispatch(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def _dispatch(args):
    from .artifacts import write_csv, write_json
    from .config import load_config

    if args.command == "train":
        from .runner import run_training
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out_dir = _resolve_out_dir(args, cfg.out_dir, "runs/train")
        summary = run_training(cfg, out_dir=out_dir, resume=args.resume)
        summary.pop("_params", None)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "eval":
        from .runner import run_eval
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        metrics = run_eval(args.checkpoint, cfg)
        out_dir = _resolve_out_dir(args, cfg.out_dir, None)
        if out_dir:
            write_json(os.path.join(out_dir, "eval.json"), metrics)
        print(json.dumps(metrics, indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "bench":
        from .bench import run_bench
        sizes = [int(s) for s in args.sizes.split(",") if s]
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        rows = run_bench(sizes, modes=modes, batch=args.batch,
                         reps=args.reps, field=args.field, seed=args.seed)
        out_dir = _resolve_out_dir(args, None, None)
        if out_dir:
            write_csv(os.path.join(out_dir, "bench.csv"),
                      ("mode", "n", "median_s", "mad_s", "reps", "batch"),
                      rows)
        for row in rows:
            print(f"{row['mode']:>5}  N={row['n']:<6} "
                  f"median {row['median_s']:.3e}s  mad {row['mad_s']:.1e}s")
        return EXIT_OK

    if args.command == "diag":
        from .runner import run_diag
        sweep = None
        if args.sweep:
            sweep = [float(s) for s in args.sweep.split(",") if s]
        out_dir = _resolve_out_dir(args, None, None)
        report = run_diag(args.source, sweep=sweep, out_dir=out_dir,
                          seed=args.seed)
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
