"""``m2s`` command line: train, eval, gradcheck, ablate, gen-data.

Exit status is 0 on success, 1 for invalid input (config, checkpoint,
arguments) and 2 for numerical failures (non-finite loss, failed gradient
check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import tensor as T
from .checkpoint import CheckpointError
from .config import VARIANTS, ConfigError, RunConfig

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("m2s")


def _config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig(base_dir=Path.cwd())


def cmd_train(args) -> int:
    from .train import train
    cfg = _config(args.config)
    result = train(cfg, args.out)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"checkpoint": str(args.out), "epochs": len(result.history),
                      "final_loss": last.get("loss_total"), "val_AP50": last.get("val_AP50")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import run_eval
    cfg = _config(args.config)
    report = run_eval(cfg, args.ckpt, args.split, args.out, args.render, force=args.force)
    print(report.dumps(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import REGISTRY, format_table, run_gradchecks
    if args.op is not None and args.op not in REGISTRY:
        print(f"error: unknown op {args.op!r}; known: {', '.join(REGISTRY)}", file=sys.stderr)
        return EXIT_INVALID
    seeds = range(args.seed, args.seed + args.num_seeds)
    if args.corrupt:
        with T.tampered_gradient(*args.corrupt.split(",")):
            results = run_gradchecks(seeds, args.op)
    else:
        results = run_gradchecks(seeds, args.op)
    print(format_table(results))
    total = sum(r.seconds for r in results)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {total:.1f}s")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import ablate, check_variants, write_report
    variants = check_variants(v for v in args.variants.split(",") if v)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError as err:
        raise ConfigError(f"--seeds must be comma-separated integers: {err}") from err
    cfg = _config(args.config)
    out = Path(args.out)
    work = Path(args.work_dir) if args.work_dir else out.with_name(out.stem + "_runs")
    report = ablate(cfg, variants, seeds, work)
    md, js = write_report(report, out)
    print(report.markdown(), end="")
    print(f"wrote {md} and {js}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import generate_dataset
    cfg = _config(args.config)
    root = generate_dataset(cfg.data.scene, args.out, cfg.data.train_count, cfg.data.val_count)
    print(f"wrote {cfg.data.train_count} train and {cfg.data.val_count} val images to {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2s", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    t.add_argument("--config", help="JSON run config (defaults when omitted)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", help="output prefix for .metrics.json / .detections.json")
    e.add_argument("--render", metavar="DIR", help="write images with predicted boxes")
    e.add_argument("--force", action="store_true", help="load despite a config-hash mismatch")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0, help="first seed")
    g.add_argument("--num-seeds", type=int, default=5)
    g.add_argument("--op", help="run only this check")
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train a variant x seed matrix")
    a.add_argument("--config")
    a.add_argument("--variants", default="base,cam+drm", help=f"comma list from {','.join(VARIANTS)}")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", required=True, help="report path (.md or .json; both are written)")
    a.add_argument("--work-dir", help="where per-run checkpoints go")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("gen-data", help="generate the synthetic dataset")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    from .train import NumericalError
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError, T.ShapeError, FileNotFoundError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
