"""COCO-style AP/AR evaluation (101-point interpolation, greedy score-ordered matching)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detect import Box, iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = (1, 10, 100)


@dataclass
class MetricsReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AR1: float = 0.0
    AR10: float = 0.0
    AR100: float = 0.0

    def to_dict(self) -> dict:
        return {k: round(float(v), 10) for k, v in asdict(self).items()}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class Prediction:
    image_id: int
    class_id: int
    score: float
    box: Box

    @classmethod
    def coerce(cls, p) -> "Prediction":
        if isinstance(p, Prediction):
            return p
        if isinstance(p, Mapping):
            return cls(int(p["image_id"]), int(p["class_id"]), float(p["score"]),
                       Box(float(p["x1"]), float(p["y1"]), float(p["x2"]), float(p["y2"])))
        image_id, det = p
        return cls(int(image_id), det.class_id, det.score, det.box)


def _match(dt_boxes: np.ndarray, gt_boxes: np.ndarray, thresholds) -> np.ndarray:
    """Boolean ``[T, D]``: whether each score-ordered detection is a true positive."""
    tp = np.zeros((len(thresholds), len(dt_boxes)), dtype=bool)
    if len(dt_boxes) == 0 or len(gt_boxes) == 0:
        return tp
    ious = iou_matrix(dt_boxes, gt_boxes)
    for t, thr in enumerate(thresholds):
        taken = np.zeros(len(gt_boxes), dtype=bool)
        for d in range(len(dt_boxes)):
            best, best_iou = -1, min(thr, 1 - 1e-10)
            for g in range(len(gt_boxes)):
                if taken[g] or ious[d, g] < best_iou:
                    continue
                best, best_iou = g, ious[d, g]
            if best >= 0:
                taken[best] = True
                tp[t, d] = True
    return tp


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def evaluate(predictions: Iterable, ground_truth: Mapping[int, Sequence[tuple[Box, int]]]) -> MetricsReport:
    """Score predictions against ground truth.

    ``predictions`` may hold :class:`Prediction`, mapping records with
    image_id/class_id/score/x1..y2, or ``(image_id, Detection)`` pairs.
    AP uses at most 100 detections per image and class; classes without
    ground truth are left out of the averages.
    """
    preds = [Prediction.coerce(p) for p in predictions]
    for p in preds:
        if p.image_id not in ground_truth:
            raise KeyError(f"prediction refers to unknown image_id {p.image_id}")
    # stable: equal scores keep insertion order
    order = sorted(range(len(preds)), key=lambda k: -preds[k].score)
    preds = [preds[k] for k in order]

    grouped: dict[tuple[int, int], list[Prediction]] = {}
    for p in preds:
        grouped.setdefault((p.image_id, p.class_id), []).append(p)

    classes = sorted({c for gts in ground_truth.values() for _, c in gts})
    if not classes:
        return MetricsReport()
    ap = np.zeros((len(classes), len(IOU_THRESHOLDS)))
    ar = {k: np.zeros((len(classes), len(IOU_THRESHOLDS))) for k in MAX_DETS}
    for ci, cls in enumerate(classes):
        n_gt = 0
        per_image = []
        for image_id in sorted(ground_truth):
            gt = np.array([b.as_array() for b, c in ground_truth[image_id] if c == cls]).reshape(-1, 4)
            dts = grouped.get((image_id, cls), [])
            n_gt += len(gt)
            per_image.append((gt, dts))
        for k in MAX_DETS:
            scores, flags = [], []
            for gt, dts in per_image:
                dts = dts[:k]
                dt = np.array([p.box.as_array() for p in dts]).reshape(-1, 4)
                flags.append(_match(dt, gt, IOU_THRESHOLDS))
                scores.extend(p.score for p in dts)
            if not scores:
                continue
            tp_all = np.concatenate(flags, axis=1)
            ranked = np.argsort(-np.array(scores), kind="mergesort")
            tp_all = tp_all[:, ranked]
            if n_gt:
                ar[k][ci] = tp_all.sum(axis=1) / n_gt
            if k == 100:
                ap[ci] = [_interpolated_ap(tp_all[t], n_gt) for t in range(len(IOU_THRESHOLDS))]
    t50 = 0
    t75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return MetricsReport(
        AP=float(ap.mean()), AP50=float(ap[:, t50].mean()), AP75=float(ap[:, t75].mean()),
        AR1=float(ar[1].mean()), AR10=float(ar[10].mean()), AR100=float(ar[100].mean()),
    )
