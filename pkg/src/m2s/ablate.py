"""Variant x seed ablation matrix with median-over-seeds summaries."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import VARIANTS, ConfigError, RunConfig, with_variant
from .train import ensure_dataset, evaluate_model, train
from .data import load_split

log = logging.getLogger(__name__)

METRIC_KEYS = ("AP", "AP50", "AP75")


@dataclass
class AblationReport:
    variants: list[str]
    seeds: list[int]
    runs: dict[str, dict[int, dict]] = field(default_factory=dict)

    def median(self, variant: str, key: str) -> float:
        return float(np.median([self.runs[variant][s][key] for s in self.seeds]))

    def delta(self, variant: str, key: str) -> float | None:
        if "base" not in self.runs:
            return None
        return self.median(variant, key) - self.median("base", key)

    def to_dict(self) -> dict:
        summary = {}
        for v in self.variants:
            row = {k: self.median(v, k) for k in METRIC_KEYS}
            for k in METRIC_KEYS:
                d = self.delta(v, k)
                if d is not None:
                    row[f"delta_{k}"] = d
            summary[v] = row
        return {"seeds": self.seeds, "variants": self.variants, "summary": summary,
                "runs": {v: {str(s): r for s, r in per.items()} for v, per in self.runs.items()}}

    def markdown(self) -> str:
        """Table with one row per variant; values are val percentages, deltas are vs base."""
        head = "| variant | " + " | ".join(METRIC_KEYS) + " |"
        lines = [head, "|" + "---|" * (len(METRIC_KEYS) + 1)]
        for v in self.variants:
            cells = []
            for k in METRIC_KEYS:
                cell = f"{100 * self.median(v, k):.2f}"
                d = self.delta(v, k)
                if d is not None and v != "base":
                    cell += f" ({100 * d:+.2f})"
                cells.append(cell)
            lines.append(f"| {v} | " + " | ".join(cells) + " |")
        lines.append("")
        lines.append(f"Median over seeds {', '.join(map(str, self.seeds))}; AP values in percent on the val split.")
        return "\n".join(lines) + "\n"


def check_variants(variants) -> list[str]:
    variants = list(variants)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; expected a subset of {list(VARIANTS)}")
    if not variants:
        raise ConfigError("no variants given")
    return variants


def ablate(cfg: RunConfig, variants, seeds, work_dir) -> AblationReport:
    """Train every (variant, seed) pair on one shared dataset and collect val metrics."""
    variants = check_variants(variants)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("no seeds given")
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    root = ensure_dataset(cfg)
    val = load_split(root, "val", cfg.data.scene.image_size)
    report = AblationReport(variants, seeds)
    for v in variants:
        report.runs[v] = {}
        for s in seeds:
            run_cfg = with_variant(cfg, v, s)
            # per-epoch val AP is not needed here; only the final weights are scored
            run_cfg.train.log_val_ap = False
            t0 = time.perf_counter()
            result = train(run_cfg, work_dir / f"{v}_seed{s}.ckpt")
            metrics = evaluate_model(result.model, run_cfg, *val)[0].to_dict()
            metrics["seconds"] = round(time.perf_counter() - t0, 1)
            report.runs[v][s] = metrics
            log.info("%s seed %d: AP50 %.4f (%.0fs)", v, s, metrics["AP50"], metrics["seconds"])
    return report


def write_report(report: AblationReport, out) -> tuple[Path, Path]:
    """Write ``out`` as markdown (``.md``) or JSON, plus the other form next to it."""
    out = Path(out)
    md = out if out.suffix == ".md" else out.with_suffix(".md")
    js = out if out.suffix == ".json" else out.with_suffix(".json")
    md.write_text(report.markdown())
    js.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return md, js
