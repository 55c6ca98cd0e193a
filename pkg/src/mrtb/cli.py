"""Command-line entry points: run, grid, sweep-reference, analyze, gen-data.

Exit codes: 0 success, 1 configuration error, 2 run failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_config
from .errors import InvalidConfigError, InvalidInputError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mrtb", description="MoE routing testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train a single configuration")
    run_p.add_argument("--config", required=True)

    grid_p = sub.add_parser("grid", help="run a method x scope x strength grid")
    grid_p.add_argument("--config", required=True)
    grid_p.add_argument("--workers", type=int, default=None)

    sweep_p = sub.add_parser("sweep-reference", help="split-ratio sweep with reference masking")
    sweep_p.add_argument("--config", required=True)

    an_p = sub.add_parser("analyze", help="trade-off correlation report from a summary TSV")
    an_p.add_argument("summary")
    an_p.add_argument("--out", default=None)

    gen_p = sub.add_parser("gen-data", help="generate and cache the configured corpus")
    gen_p.add_argument("--config", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface run failures as exit 2
        print(f"run failure: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "run":
        record = harness.run_experiment(load_config(args.config))
        print(f"status={record.status} out={record.out_dir}")
        for key, value in sorted(record.summary.items()):
            print(f"{key} = {value}")
        return 0 if record.status == "ok" else 2

    if args.command == "grid":
        cfg = load_config(args.config)
        if args.workers is not None:
            cfg.grid = dataclasses.replace(cfg.grid, workers=args.workers)
        summary = harness.run_grid(cfg)
        print(f"summary written to {summary}")
        return 0

    if args.command == "sweep-reference":
        sweep = harness.run_reference_sweep(load_config(args.config))
        print(f"sweep written to {sweep}")
        return 0

    if args.command == "analyze":
        out = args.out or str(Path(args.summary).with_name("tradeoff_report.tsv"))
        rho, tau, n = harness.analyze_tradeoff(args.summary, out)
        print(f"spearman={rho:.4f} kendall={tau:.4f} n={n} report={out}")
        return 0

    if args.command == "gen-data":
        cfg = load_config(args.config)
        if not cfg.data.cache:
            cfg.data = dataclasses.replace(cfg.data, cache=str(Path(cfg.out_dir) / "data.mrtb"))
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        vocab, domains, sequences, truth = harness.prepare_data(cfg)
        print(f"cached {len(sequences)} sequences (vocab={vocab}, domains={domains}) "
              f"to {cfg.data.cache}")
        return 0

    raise InvalidConfigError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
