"""Command-line entry points: train, probe, leakage, report, dump-data."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff import ConfigError
from .config import ANCHOR_MODES, PROFILES, build_config
from .harness import TrainingDiverged, cmg_probe, emit_report, leakage_probe, run_training
from .synthdata import dump_dataset


def _add_train(sub):
    p = sub.add_parser("train", help="run a training job")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", action="append", choices=["no_grl", "no_align"], default=[])
    p.add_argument("--anchor", choices=ANCHOR_MODES, default=None)
    p.add_argument("--profile", choices=sorted(PROFILES), default=None)
    p.add_argument("--out", required=True)


def _add_probe(sub):
    p = sub.add_parser("probe", help="cross-modal linear probe on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", required=True, choices=["v2a", "a2v"])
    p.add_argument("--out", default=None, help="directory for probe_<direction>.json")


def _add_leakage(sub):
    p = sub.add_parser("leakage", help="semantic-leakage probe on the specific branch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="directory for leakage.json")


def _add_report(sub):
    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("--run", required=True)


def _add_dump(sub):
    p = sub.add_parser("dump-data", help="write the synthetic dataset as columnar text")
    p.add_argument("--config", default=None)
    p.add_argument("--profile", choices=sorted(PROFILES), default=None)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aha")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_probe(sub)
    _add_leakage(sub)
    _add_report(sub)
    _add_dump(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            overrides = {"seed": args.seed, "anchor": args.anchor}
            for flag in args.ablate:
                overrides[flag] = True
            config = build_config(args.config, profile=args.profile, overrides=overrides)
            checkpoint, metrics = run_training(config, args.out)
            print(f"checkpoint: {checkpoint}")
            print(f"metrics: {metrics}")
        elif args.command == "probe":
            result = cmg_probe(args.checkpoint, args.direction)
            print(json.dumps(result, indent=2))
            out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
            (out_dir / f"probe_{args.direction}.json").write_text(json.dumps(result, indent=2))
        elif args.command == "leakage":
            result = leakage_probe(args.checkpoint)
            print(json.dumps(result, indent=2))
            out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
            (out_dir / "leakage.json").write_text(json.dumps(result, indent=2))
        elif args.command == "report":
            print(json.dumps(emit_report(args.run), indent=2, sort_keys=True))
        elif args.command == "dump-data":
            config = build_config(args.config, profile=args.profile)
            from .harness import dataset_for
            dump_dataset(dataset_for(config), args.out)
            print(f"wrote {args.out}")
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
