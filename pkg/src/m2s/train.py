"""Two-phase training loop, split evaluation and detection dumps."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import generate_dataset, load_split, read_ppm, write_ppm
from .detect import Box, Detection, LossWeights, assign_targets, decode_and_nms, detection_loss
from .metrics import MetricsReport, evaluate
from .model import M2SDetector
from .optim import OptimHyper, clip_grad_norm, optimizer_step, reset_state

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: M2SDetector
    history: list[dict] = field(default_factory=list)


def ensure_dataset(cfg: RunConfig) -> Path:
    root = cfg.resolve(cfg.data.root)
    if not (root / "annotations.txt").exists():
        log.info("generating dataset in %s", root)
        generate_dataset(cfg.data.scene, root, cfg.data.train_count, cfg.data.val_count)
    return root


def predict(model: M2SDetector, images: np.ndarray, cfg: RunConfig, batch_size: int = 16) -> list[list[Detection]]:
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            raw = model(T.Tensor(images[s:s + batch_size]))
            out.extend(decode_and_nms(raw, cfg.eval.conf_thresh, cfg.eval.nms_thresh, cfg.eval.max_det))
    return out


def detection_records(ids, dets: list[list[Detection]]) -> list[dict]:
    recs = []
    for image_id, per_image in zip(ids, dets):
        for d in per_image:
            recs.append({"image_id": int(image_id), "class_id": d.class_id, "score": d.score,
                         "x1": d.box.x1, "y1": d.box.y1, "x2": d.box.x2, "y2": d.box.y2})
    return recs


def evaluate_model(model, cfg: RunConfig, ids, images, annots) -> tuple[MetricsReport, list[dict]]:
    if len(ids) == 0:
        log.warning("split is empty; reporting zeros")
        return MetricsReport(), []
    recs = detection_records(ids, predict(model, images, cfg))
    return evaluate(recs, annots), recs


def train(cfg: RunConfig, out_path, log_path=None, on_epoch=None) -> TrainResult:
    """Run AdamW then SGD-momentum, writing the checkpoint after every epoch.

    The file at ``out_path`` always holds the last finite-loss state, so a
    :class:`NumericalError` leaves a usable checkpoint behind.
    """
    tc = cfg.train
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_name(out_path.name + ".log.jsonl")
    root = ensure_dataset(cfg)
    ids, images, annots = load_split(root, "train", cfg.data.scene.image_size)
    val = load_split(root, "val", cfg.data.scene.image_size) if tc.log_val_ap else None
    model = M2SDetector(cfg.model, seed=tc.seed)
    params = model.parameters()
    chash = cfg.model_hash()
    save_checkpoint(out_path, model, chash, {"epoch": 0})
    weights = LossWeights(tc.box_weight, tc.obj_weight, tc.cls_weight)
    order_rng = np.random.default_rng([tc.seed, 7])
    hw = images.shape[2:]
    history = []
    log_lines = []
    phases = [("adamw", tc.phase1_lr, tc.phase1_epochs), ("sgd_momentum", tc.phase2_lr, tc.phase2_epochs)]
    epoch = 0
    batches_per_epoch = -(-len(ids) // tc.batch_size)
    warmup_steps = tc.warmup_epochs * batches_per_epoch
    for phase, lr, n_epochs in phases:
        reset_state(params)
        hyper = OptimHyper(lr=lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
        step = 0
        for _ in range(n_epochs):
            epoch += 1
            perm = order_rng.permutation(len(ids))
            sums = {"total": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}
            n_batches = 0
            for b, s in enumerate(range(0, len(perm), tc.batch_size)):
                sel = perm[s:s + tc.batch_size]
                targets = assign_targets([annots[ids[k]] for k in sel], hw)
                model.zero_grad()
                loss, parts = detection_loss(model(T.Tensor(images[sel])), targets,
                                             cfg.model.num_classes, weights)
                if not np.isfinite(parts["total"]):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}; "
                                         f"{out_path} holds the epoch {epoch - 1} weights")
                T.backward(loss)
                if tc.grad_clip is not None:
                    clip_grad_norm(params, tc.grad_clip)
                step += 1
                if phase == "adamw" and step <= warmup_steps:
                    # linear warmup of the AdamW phase
                    hyper.lr = lr * step / warmup_steps
                else:
                    hyper.lr = lr
                optimizer_step(params, phase, hyper)
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
            rec = {"epoch": epoch, "phase": phase, "lr": lr}
            rec.update({f"loss_{k}": v / max(1, n_batches) for k, v in sums.items()})
            rec["beta"] = model.betas()
            if val is not None:
                rec["val_AP50"] = evaluate_model(model, cfg, *val)[0].AP50
            history.append(rec)
            log_lines.append(json.dumps(rec, sort_keys=True))
            log.info("epoch %d %s loss %.4f", epoch, phase, rec["loss_total"])
            save_checkpoint(out_path, model, chash, {"epoch": epoch})
            log_path.write_text("\n".join(log_lines) + "\n")
            if on_epoch:
                on_epoch(rec)
    if not log_lines:
        log_path.write_text("")
    return TrainResult(model, history)


def load_model(cfg: RunConfig, ckpt, force: bool = False) -> M2SDetector:
    model = M2SDetector(cfg.model, seed=cfg.train.seed)
    load_checkpoint(ckpt, model, cfg.model_hash(), force=force)
    return model


def render_overlays(root: Path, ids, dets: list[list[Detection]], out_dir) -> None:
    """Burn predicted boxes into copies of the split images."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = np.array([[255, 0, 0], [0, 255, 0], [0, 128, 255]], dtype=np.uint8)
    for image_id, per_image in zip(ids, dets):
        img = read_ppm(root / "images" / f"{image_id:06d}.ppm")
        h, w = img.shape[:2]
        for d in per_image:
            x1, y1 = int(np.clip(np.floor(d.box.x1), 0, w - 1)), int(np.clip(np.floor(d.box.y1), 0, h - 1))
            x2, y2 = int(np.clip(np.ceil(d.box.x2) - 1, 0, w - 1)), int(np.clip(np.ceil(d.box.y2) - 1, 0, h - 1))
            c = palette[d.class_id % len(palette)]
            img[y1, x1:x2 + 1] = c
            img[y2, x1:x2 + 1] = c
            img[y1:y2 + 1, x1] = c
            img[y1:y2 + 1, x2] = c
        write_ppm(out_dir / f"{image_id:06d}.ppm", img)


def run_eval(cfg: RunConfig, ckpt, split: str, out_prefix=None, render_dir=None, force: bool = False):
    """Evaluate ``ckpt`` on ``split``; write ``<prefix>.metrics.json`` and ``<prefix>.detections.json``."""
    root = ensure_dataset(cfg)
    model = load_model(cfg, ckpt, force)
    ids, images, annots = load_split(root, split, cfg.data.scene.image_size)
    report, recs = evaluate_model(model, cfg, ids, images, annots)
    prefix = Path(out_prefix) if out_prefix else Path(f"{ckpt}.{split}")
    Path(str(prefix) + ".metrics.json").write_text(report.dumps())
    Path(str(prefix) + ".detections.json").write_text(json.dumps(recs, indent=1, sort_keys=True) + "\n")
    if render_dir is not None and ids:
        by_id = {}
        for r in recs:
            by_id.setdefault(r["image_id"], []).append(r)
        dets = [[Detection(Box(r["x1"], r["y1"], r["x2"], r["y2"]), r["score"], r["class_id"])
                 for r in by_id.get(i, [])] for i in ids]
        render_overlays(root, ids, dets, render_dir)
    return report

