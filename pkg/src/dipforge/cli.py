"""Command-line entry point: ``dipforge <stage> --config run.yaml``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from dipforge.checkpoint import CheckpointError
from dipforge.config import load_config
from dipforge.model import ConfigError
from dipforge.pipeline import STAGES, Pipeline, StageError, validate_lineage

COMMANDS = (*STAGES, "bench", "all")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dipforge", description="Train, reparameterize, prune and evaluate SR models.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="dotted override, e.g. prune.rate=0.1 (repeatable)")
        s.add_argument("--device", choices=("cpu", "gpu"), default="cpu")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--force", action="store_true", help="re-run even if the stored config differs")
        if name in ("eval", "bench", "all"):
            s.add_argument("--random-init", action="store_true", help="also evaluate an untrained student")
        s.add_argument("-v", "--verbose", action="store_true")
    t = sub.add_parser("toyset", help="write the procedural toy dataset")
    t.add_argument("out_dir")
    t.add_argument("--count", type=int, default=32)
    t.add_argument("--val-count", type=int, default=8)
    t.add_argument("--size", type=int, default=96)
    t.add_argument("--seed", type=int, default=0)
    v = sub.add_parser("verify", help="check artifact hashes and lineage of a work directory")
    v.add_argument("work_dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "toyset":
        from dipforge.toyset import write_toyset

        dirs = write_toyset(args.out_dir, args.count, args.val_count, args.size, args.seed)
        print(json.dumps({k: str(v) for k, v in dirs.items()}))
        return 0
    if args.command == "verify":
        problems = validate_lineage(args.work_dir)
        for line in problems:
            print(line, file=sys.stderr)
        print("lineage ok" if not problems else f"{len(problems)} problem(s)")
        return 0 if not problems else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed)
        pipe = Pipeline(cfg, device=args.device, force=args.force,
                        random_init=getattr(args, "random_init", False))
        result = pipe.run(args.command)
    except (ConfigError, StageError, CheckpointError, FileNotFoundError) as e:
        print(f"dipforge: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
