"""Command line interface.

Subcommands: train, eval, optimize-scale, experiment, oracle-check.
Exit codes: 0 success, 1 unexpected failure, 2 config or enumeration
limit problems, 3 malformed data files, 4 infeasible scale constraints,
5 diverged training.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .errors import (ConfigError, DataFormatError, DivergenceError,
                     EnumerationLimitError, InfeasibleScaleError, RepairError)
from .harness import (RunConfig, cmd_eval, cmd_experiment, cmd_oracle_check,
                      cmd_optimize_scale, cmd_train, default_config,
                      load_config)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the base seed")
    parser.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dropscale",
        description="train dropout networks and compare inference-time "
                    "approximations against exact mask averaging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save it")
    _add_common(p)

    p = sub.add_parser("eval", help="score inference methods on a model")
    _add_common(p)
    p.add_argument("--model", required=True, help="saved model file")
    p.add_argument("--methods",
                   help="comma list, e.g. uniform,mc_arithmetic,nonuniform")
    p.add_argument("--mc-samples", type=int, dest="mc_samples",
                   help="Monte Carlo sample count override")
    p.add_argument("--scale", help="scale vector file for nonuniform")

    p = sub.add_parser("optimize-scale",
                       help="fit a non-uniform scale vector for a model")
    _add_common(p)
    p.add_argument("--model", required=True, help="saved model file")

    p = sub.add_parser("experiment",
                       help="repeated split/train/optimize/evaluate protocol")
    _add_common(p)
    p.add_argument("--mc-samples", type=int, dest="mc_samples",
                   help="Monte Carlo sample count override")

    p = sub.add_parser("oracle-check",
                       help="max approximation gaps on seeded small networks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the table as CSV here")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.override("seed", args.seed)
    if args.out is not None:
        cfg.override("out", args.out)
    if getattr(args, "mc_samples", None) is not None:
        cfg.override("mc.samples", args.mc_samples)
    return cfg


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(_resolve_config(args))
        elif args.command == "eval":
            cmd_eval(_resolve_config(args), args.model, methods=args.methods,
                     mc_samples=args.mc_samples, scale_path=args.scale)
        elif args.command == "optimize-scale":
            cmd_optimize_scale(_resolve_config(args), args.model)
        elif args.command == "experiment":
            cmd_experiment(_resolve_config(args))
        else:
            cmd_oracle_check(seed=args.seed, out_dir=args.out)
    except (ConfigError, EnumerationLimitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (InfeasibleScaleError, RepairError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
