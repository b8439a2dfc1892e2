"""Desk-scale ablation: every variant on the default dataset and schedule.

Writes a markdown table and a JSON dump. The gated pair is base vs cam+drm;
the remaining rows are informational.

    python3 scripts/run_ablation.py --out results/ablation.md [--variants base,cam+drm] [--seeds 0,1,2]
"""

import argparse
import logging
from pathlib import Path

from m2s.ablate import ablate, check_variants, write_report
from m2s.config import VARIANTS, RunConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run config; defaults when omitted")
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", default="results/ablation.md")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig.load(args.config) if args.config else RunConfig(base_dir=out.parent)
    variants = check_variants(args.variants.split(","))
    seeds = [int(s) for s in args.seeds.split(",")]
    report = ablate(cfg, variants, seeds, out.parent / "runs")
    write_report(report, out)
    print(report.markdown(), end="")


if __name__ == "__main__":
    main()
