"""Command-line entry point: ``agrohydro <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, load_config, preset
from .dekf import DekfDivergenceError
from .experiment import (
    PipelineError, compute_metrics, export, export_baseline, run_baseline_centralized_ekf,
    run_experiment, summary_text,
)
from .richards import InstabilityError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
log = logging.getLogger("agrohydro")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    src.add_argument("--preset", choices=PRESETS, help="bundled scenario (default paper-loam)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--duration", type=float, help="override the run length in hours")
    common.add_argument("--out", type=Path, help="output directory (default runs/<subcommand>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="agrohydro", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="truth run and noisy sensor readings")
    sub.add_parser("dekf", parents=[common], help="truth run plus the distributed EKF")
    d = sub.add_parser("dmhe", parents=[common],
                       help="DMHE alone, fed the true retention parameters")
    d.add_argument("--start-hours", type=float, default=0.0,
                   help="time the DMHE becomes active (rounded up to a DMHE instant)")
    sub.add_parser("full-run", parents=[common], help="DEKF, hand-off at convergence, DMHE")
    b = sub.add_parser("baseline-ekf", parents=[common], help="centralized EKF comparison")
    b.add_argument("--guess", type=int, choices=range(1, 5), action="append",
                   help="initial-guess row (1-4); repeatable, default all")
    m = sub.add_parser("metrics", help="print the summary of a finished run")
    m.add_argument("run_dir", type=Path)
    m.add_argument("--json", action="store_true", help="print metrics.json instead")
    return p


def _config(args):
    cfg = load_config(args.config) if args.config else preset(args.preset or "paper-loam")
    duration = None if args.duration is None else args.duration * 3600.0
    return cfg.with_overrides(seed=args.seed, duration=duration,
                              out=str(args.out) if args.out else None)


def _out(args, cfg) -> Path:
    return Path(cfg.out) if cfg.out else Path("runs") / args.command


def _metrics(args) -> int:
    path = args.run_dir / "metrics.json"
    try:
        data = path.read_text()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(data, end="")
        return EXIT_OK
    summary = args.run_dir / "summary.txt"
    print(summary.read_text() if summary.exists() else json.dumps(json.loads(data), indent=2),
          end="")
    return EXIT_OK


def run(args) -> int:
    if args.command == "metrics":
        return _metrics(args)
    cfg = _config(args)
    out = _out(args, cfg)
    if args.command == "baseline-ekf":
        guesses = args.guess or [1, 2, 3, 4]
        results = []
        truth = None
        for g in guesses:
            r = run_baseline_centralized_ekf(cfg, g, truth=truth)
            results.append(r)
            print(f"guess {g}: final relative errors "
                  + " ".join(f"{e:.3f}" for e in r.final_rel_error)
                  + ("  (within 10%)" if r.within_band else ""))
        export_baseline(results, out)
        return EXIT_OK
    if args.command == "simulate":
        res = run_experiment(cfg, stages=())
    elif args.command == "dekf":
        res = run_experiment(cfg, stages=("dekf",))
    elif args.command == "dmhe":
        stride = cfg.dmhe_stride
        k = int(-(-round(args.start_hours * 3600.0 / cfg.dekf_period) // stride) * stride)
        res = run_experiment(cfg, stages=("dmhe",), oracle_beta=True, dmhe_start=k)
    else:
        res = run_experiment(cfg)
    metrics = compute_metrics(res)
    export(res, out, metrics)
    print(summary_text(metrics, cfg), end="")
    print(f"outputs in {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, InstabilityError, DekfDivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
