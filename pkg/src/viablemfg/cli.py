"""Command line entry point: ``viablemfg run|plot|validate``."""

from __future__ import annotations

import argparse
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viablemfg", description="Mean field games with invariant dynamics.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run an experiment"), ("validate", "check a configuration without running"),
                        ("plot", "emit plot data for a finished study")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="TOML or JSON experiment file")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int, help="override the configured seed (unsigned 64-bit)")
        s.add_argument("--threads", type=int, help="BLAS threads (default: $VIABLEMFG_THREADS)")
        if name == "plot":
            s.add_argument("--which", help="study id; defaults to the kind recorded in the manifest")
    return p


def _set_threads(n):
    n = n or os.environ.get("VIABLEMFG_THREADS")
    if n:
        for var in THREAD_VARS:
            os.environ[var] = str(int(n))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _set_threads(args.threads)
    # heavy imports after the thread variables are set
    from .experiments import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, ExperimentConfig, RunManifest, \
        emit_plot_data, exit_code_for, run

    try:
        if args.command == "plot":
            if not args.out:
                raise ValueError("plot needs --out pointing at a finished run")
            which = args.which or RunManifest.load(args.out).kind
            for path in emit_plot_data(args.out, which):
                print(path)
            return EXIT_OK
        if not args.config:
            raise ValueError("--config is required")
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out = args.out
        cfg.validate()
        if args.command == "validate":
            print(f"ok: {cfg.kind} ({cfg.hash()[:12]})")
            return EXIT_OK
        manifest = run(cfg)
        for name, ok in sorted(manifest.checks.items()):
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        return EXIT_OK if manifest.passed else EXIT_CHECK_FAILED
    except Exception as exc:  # noqa: BLE001
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code if code else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
