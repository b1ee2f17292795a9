"""Command-line entry point.

    tsclab run --method tsc --seeds 0-2 --tsc.beta 0.1
    tsclab sweep --grid tsc.beta=0,0.01,0.1,1
    tsclab report runs/tsc runs/mr --out-dir runs/report

Any config key can be given as ``--section.key value`` (or
``--section.key=value``).  The output root comes from ``--out``, then the
``TSCLAB_OUT`` environment variable, then ``run.out``.  Errors are printed
as one JSON object on stderr and give a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import DEFAULTS, load_config
from .errors import ConfigError, ParseError, TscLabError

EXIT_USAGE = 2
EXIT_FAILED = 1


def _dotted_overrides(extra: list) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{tok} needs a value")
            value = extra[i + 1]
            i += 2
        if key not in DEFAULTS:
            raise ConfigError(f"unknown option --{key}")
        out[key] = value
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output root (default: $TSCLAB_OUT or run.out)")
    p.add_argument("--method", choices=["jt", "st", "mr", "cp", "ewc_m", "mas_m", "si_m", "tsc"])
    p.add_argument("--mode", choices=["new-class", "new-instance"])
    p.add_argument("--seeds", help="e.g. 0-9 or 0,3,5")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsclab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("pretrain", help="pretrain the embedding of every seed")
    _common(p)
    p = sub.add_parser("run", help="run one method over every seed")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from task checkpoints")
    p = sub.add_parser("sweep", help="grid over config keys, merged into one CSV")
    _common(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="repeat for a product grid")
    p = sub.add_parser("report", help="aggregate run directories into summary.csv")
    p.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    p.add_argument("--out-dir", default=None, help="where to write (default: current dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("inspect-checkpoint", help="summarize a checkpoint file")
    p.add_argument("path")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve(args, extra):
    overrides = _dotted_overrides(extra)
    if args.method:
        overrides["method.name"] = args.method
    if args.mode:
        overrides["stream.mode"] = args.mode.replace("-", "_")
    if args.seeds:
        overrides["run.seeds"] = args.seeds
    cfg = load_config(args.config, overrides)
    out = args.out or os.environ.get("TSCLAB_OUT") or None
    return cfg, out


def inspect_checkpoint(path) -> dict:
    from .checkpoint import load_checkpoint

    doc = load_checkpoint(path)
    info = {"path": str(path), "kind": doc["kind"], "version": doc["version"]}
    if doc["kind"] == "weights":
        info.update(spec=doc["spec"], n_values=len(doc["values"]),
                    has_optimizer="optimizer" in doc)
    elif doc["kind"] == "run-state":
        learner = doc["learner"]
        info.update(seed=doc["seed"], t=doc["t"], method=doc["config"]["method.name"],
                    spec=learner["spec"], rows=len(doc["rows"]))
        if "activity" in learner:
            info["tasks_seen"] = learner["activity"]["tasks_seen"]
    return info


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from . import runner

    try:
        if args.command in ("report", "inspect-checkpoint"):
            if extra:
                raise ConfigError(f"unexpected arguments {' '.join(extra)}")
            if args.command == "report":
                path = runner.emit_report([Path(r) for r in args.runs], args.out_dir or ".")
                print(path)
            else:
                print(json.dumps(inspect_checkpoint(args.path), indent=1, sort_keys=True))
            return 0
        cfg, out = _resolve(args, extra)
        if args.command == "pretrain":
            for p in runner.pretrain_all(cfg, out):
                print(p)
        elif args.command == "run":
            run_dir = runner.run_experiment(cfg, out, resume=args.resume)
            print(run_dir)
            if (run_dir / "failures.csv").exists():
                _error("RunFailed", f"some seeds failed; see {run_dir / 'failures.csv'}")
                return EXIT_FAILED
        elif args.command == "sweep":
            if not args.grid:
                raise ConfigError("sweep needs at least one --grid KEY=V1,V2")
            print(runner.sweep(cfg, runner.parse_grid(args.grid), out))
        return 0
    except (ConfigError, ParseError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_USAGE
    except (TscLabError, OSError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_FAILED


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
