"""Command line entry point: ``rollgcn {train,evaluate,sweep,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .dataio import ConfigError, DataError, SynthSpec
from .experiment import (SYNTH_TARGETS, evaluate_checkpoint, help_config, load_config, parse_config,
                         run, sweep, synth)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rollgcn", description=__doc__)
    ap.add_argument("--help-config", action="store_true", help="print every config key with its default and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command")

    def common(p, needs_config=True):
        p.add_argument("--config", type=Path, required=needs_config, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        p.add_argument("--threads", type=int, default=1, help="concurrent sweep cells")

    common(sub.add_parser("train", help="train, evaluate on the test range, write reports"))
    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on the test range")
    common(ev)
    ev.add_argument("--checkpoint", type=Path, required=True)
    common(sub.add_parser("sweep", help="run the declared variant/window/layer/feature grid"))
    common(sub.add_parser("synth", help="write a synthetic events.csv/items.csv pair"), needs_config=False)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    if args.help_config:
        sys.stdout.write(help_config())
        return 0
    if args.command is None:
        ap.print_help()
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.config is not None:
            cfg = load_config(args.config, args.seed)
        else:
            cfg = parse_config("", seed=args.seed)
        if args.command == "train":
            d = run(cfg, args.out)
            print(f"run written to {d}")
        elif args.command == "evaluate":
            d = evaluate_checkpoint(cfg, args.checkpoint, args.out)
            print(f"evaluation written to {d}")
        elif args.command == "sweep":
            d = sweep(cfg, args.out, args.threads)
            print(f"sweep written to {d}")
        elif args.command == "synth":
            spec = cfg.synth_spec
            if args.seed is not None:
                spec = SynthSpec(**{**spec.__dict__, "seed": args.seed})
            stats = synth(spec, args.out)
            print(f"wrote {args.out / 'events.csv'} and {args.out / 'items.csv'}")
            for key, value in stats.items():
                target = SYNTH_TARGETS.get(key)
                extra = f"  (target {target})" if target is not None else ""
                print(f"  {key:24s} {value:.4f}{extra}")
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 1
    return 0
