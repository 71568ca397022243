"""Command line entry point: ``catrl train|eval|compare|export``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import load_config
from .errors import ConfigError


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    if getattr(args, "variant", None):
        out.append(f"variant.name={args.variant}")
    if getattr(args, "seed", None) is not None:
        out.append(f"run.seed={args.seed}")
    if getattr(args, "output", None):
        out.append(f'run.output_dir="{args.output}"')
    return out


def cmd_train(args) -> int:
    art = harness.run(args.config, _overrides(args))
    print(json.dumps({"output_dir": str(art.output_dir), "eval": art.report.to_dict()}, indent=2))
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set or []) if args.config else None
    report, elog = harness.evaluate_checkpoint(args.checkpoint, config, args.episodes, seed=args.seed)
    if args.log:
        elog.save(args.log)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_compare(args) -> int:
    base = load_config(args.config, _overrides(args))
    if args.preset == "table2":
        matrix = harness.table2_preset(base)
    else:
        names = [v.strip() for v in args.variants.split(",") if v.strip()]
        matrix = {v: base.with_overrides([f"variant.name={v}"]) for v in names}
    seeds = list(range(args.seeds)) if args.seed_list is None else [int(s) for s in args.seed_list.split(",")]
    doc = harness.compare(matrix, seeds, args.out, workers=args.workers)
    print(harness.render_table(doc["table"]))
    return 0 if not doc["failures"] else 2


def cmd_export(args) -> int:
    for p in harness.export_plotdata(args.run_dir, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train, checkpoint and evaluate one run")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key by dotted path")
    t.add_argument("--variant")
    t.add_argument("--seed", type=int)
    t.add_argument("--output")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with the deterministic policy")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="environment config (defaults to the one stored in the checkpoint)")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--log", help="write the per-step transition log (.npz)")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="multi-seed comparison of variants")
    c.add_argument("config")
    c.add_argument("--preset", choices=["table2", "variants"], default="table2")
    c.add_argument("--variants", default="cat,etmdp,hard_only", help="comma list, with --preset variants")
    c.add_argument("--seeds", type=int, default=4)
    c.add_argument("--seed-list")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out", required=True)
    c.add_argument("--set", action="append", metavar="KEY=VALUE")
    c.add_argument("--variant", help=argparse.SUPPRESS)
    c.set_defaults(fn=cmd_compare)

    x = sub.add_parser("export", help="write one series file per metric")
    x.add_argument("run_dir")
    x.add_argument("--out")
    x.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
