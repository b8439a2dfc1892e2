"""Box geometry, GIoU loss, the anchor-free head, target assignment, decoding and NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, activate
from .tensor import ShapeError, Tensor

EPS = 1e-7
SIZE_CLAMP = 4.0
LEVEL_STRIDES = {"p2": 4, "p3": 8, "p4": 16}
# longer-side brackets in pixels: [lo, hi)
LEVEL_BRACKETS = {"p2": (0.0, 16.0), "p3": (16.0, 32.0), "p4": (32.0, float("inf"))}


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def normalized(self) -> "Box":
        return Box(min(self.x1, self.x2), min(self.y1, self.y2), max(self.x1, self.x2), max(self.y1, self.y2))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def longer_side(self) -> float:
        return max(self.x2 - self.x1, self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int


# ---------------------------------------------------------------- geometry

def _split(b):
    if isinstance(b, Tensor):
        return tuple(T.getitem(b, (Ellipsis, k)) for k in range(4))
    b = T.as_tensor(np.asarray(b, dtype=T.default_dtype()))
    return tuple(T.getitem(b, (Ellipsis, k)) for k in range(4))


def iou_giou(a, b) -> tuple[Tensor, Tensor]:
    """Elementwise IoU and GIoU of aligned ``[..., 4]`` box arrays (x1, y1, x2, y2).

    Works on Tensors so the result is differentiable in either argument.
    Zero-area unions/enclosures are guarded by ``max(., 1e-7)``.
    """
    ax1, ay1, ax2, ay2 = _split(a)
    bx1, by1, bx2, by2 = _split(b)
    iw = T.clamp(T.minimum(ax2, bx2) - T.maximum(ax1, bx1), lo=0.0)
    ih = T.clamp(T.minimum(ay2, by2) - T.maximum(ay1, by1), lo=0.0)
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    iou = inter / T.maximum(union, EPS)
    cw = T.maximum(ax2, bx2) - T.minimum(ax1, bx1)
    ch = T.maximum(ay2, by2) - T.minimum(ay1, by1)
    enclose = cw * ch
    giou = iou - (enclose - union) / T.maximum(enclose, EPS)
    return iou, giou


def _pair_arrays(a: Box, b: Box):
    return a.normalized().as_array(), b.normalized().as_array()


def iou(a: Box, b: Box) -> float:
    with T.precision(np.float64), T.no_grad():
        return iou_giou(*_pair_arrays(a, b))[0].item()


def giou(a: Box, b: Box) -> float:
    with T.precision(np.float64), T.no_grad():
        return iou_giou(*_pair_arrays(a, b))[1].item()


def giou_loss(a, b):
    """``1 - GIoU``. Boxes give a float; Tensors give a differentiable Tensor."""
    if isinstance(a, Box) and isinstance(b, Box):
        return 1.0 - giou(a, b)
    return 1.0 - iou_giou(a, b)[1]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross IoU of ``[N,4]`` and ``[M,4]`` boxes as an ``[N,M]`` array."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, EPS)


# ---------------------------------------------------------------- head

class HeadOutput(NamedTuple):
    p2: Tensor
    p3: Tensor
    p4: Tensor

    def levels(self):
        return [("p2", self.p2), ("p3", self.p3), ("p4", self.p4)]


class LevelHead(Module):
    def __init__(self, rng, c_in: int, width: int, num_outputs: int):
        self.conv1 = Conv2d(rng, c_in, width, 3)
        self.conv2 = Conv2d(rng, width, width, 3)
        self.proj = Conv2d(rng, width, num_outputs, 1)

    def forward(self, x):
        x = activate(self.conv1(x), "leaky-relu")
        x = activate(self.conv2(x), "leaky-relu")
        return self.proj(x)


class DetectionHead(Module):
    """Per-level conv towers emitting ``[n, 5 + num_classes, h, w]`` raw maps.

    Channel layout: tx, ty, tw, th, objectness logit, class logits.
    With ``obj_prior`` set, the objectness bias starts at ``logit(obj_prior)``
    so that the background cells begin with a small loss.
    """

    def __init__(self, rng, in_channels: Sequence[int], num_classes: int, width: int = 32,
                 obj_prior: float | None = None):
        self.num_classes = num_classes
        self.heads = {name: LevelHead(rng, c, width, 5 + num_classes)
                      for name, c in zip(LEVEL_STRIDES, in_channels)}
        if obj_prior is not None:
            for head in self.heads.values():
                head.proj.bias.data[4] = np.log(obj_prior / (1 - obj_prior))

    def forward(self, p2_in: Tensor, p3_in: Tensor, p4_in: Tensor) -> HeadOutput:
        a, b, c = p2_in.shape[2:], p3_in.shape[2:], p4_in.shape[2:]
        if a != (2 * b[0], 2 * b[1]) or b != (2 * c[0], 2 * c[1]):
            raise ShapeError(f"head inputs must sit at strides 4/8/16, got extents {a}, {b}, {c}")
        return HeadOutput(*(self.heads[n](x) for n, x in zip(LEVEL_STRIDES, (p2_in, p3_in, p4_in))))


# ---------------------------------------------------------------- targets

@dataclass
class LevelTargets:
    obj: np.ndarray        # [n, h, w] in {0, 1}
    batch: np.ndarray      # [P] positive indices
    rows: np.ndarray
    cols: np.ndarray
    boxes: np.ndarray      # [P, 4]
    classes: np.ndarray    # [P]

    @property
    def num_pos(self) -> int:
        return int(self.batch.size)


def level_for(box: Box) -> str:
    side = box.longer_side
    for name, (lo, hi) in LEVEL_BRACKETS.items():
        if lo <= side < hi:
            return name
    return "p4"


def assign_targets(gts_per_image: Sequence[Sequence[tuple[Box, int]]], image_hw) -> dict[str, LevelTargets]:
    """Route each ground truth to one level by its longer side and to the cell holding its centre.

    A cell owns at most one ground truth; the larger-area box wins, earlier
    boxes win exact ties.
    """
    n = len(gts_per_image)
    H, W = image_hw
    out = {}
    for name, stride in LEVEL_STRIDES.items():
        h, w = H // stride, W // stride
        owner: dict[tuple[int, int, int], tuple[float, Box, int]] = {}
        for b, gts in enumerate(gts_per_image):
            for box, cls in gts:
                if level_for(box) != name:
                    continue
                cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
                i = min(int(np.floor(cy / stride)), h - 1)
                j = min(int(np.floor(cx / stride)), w - 1)
                key = (b, i, j)
                if key not in owner or box.area > owner[key][0]:
                    owner[key] = (box.area, box, int(cls))
        obj = np.zeros((n, h, w))
        keys = sorted(owner)
        for b, i, j in keys:
            obj[b, i, j] = 1.0
        out[name] = LevelTargets(
            obj=obj,
            batch=np.array([k[0] for k in keys], dtype=int),
            rows=np.array([k[1] for k in keys], dtype=int),
            cols=np.array([k[2] for k in keys], dtype=int),
            boxes=np.array([owner[k][1].as_array() for k in keys]).reshape(-1, 4),
            classes=np.array([owner[k][2] for k in keys], dtype=int),
        )
    return out


def encode_offsets(box: Box, row: int, col: int, stride: int, eps: float = 1e-6) -> np.ndarray:
    """Ideal raw (tx, ty, tw, th) that decode back to ``box`` at the given cell."""
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    fx = np.clip(cx / stride - col, eps, 1 - eps)
    fy = np.clip(cy / stride - row, eps, 1 - eps)
    logit = lambda p: np.log(p / (1 - p))
    return np.array([logit(fx), logit(fy),
                     np.log((box.x2 - box.x1) / stride), np.log((box.y2 - box.y1) / stride)])


def decode_boxes(t: np.ndarray, rows, cols, stride: int) -> np.ndarray:
    """Map raw offsets ``[..., 4]`` at the given cells to (x1, y1, x2, y2) pixels."""
    sig = T._stable_sigmoid(np.asarray(t[..., :2], dtype=np.float64))
    cx = (cols + sig[..., 0]) * stride
    cy = (rows + sig[..., 1]) * stride
    wh = np.exp(np.clip(t[..., 2:4], -SIZE_CLAMP, SIZE_CLAMP)) * stride
    return np.stack([cx - wh[..., 0] / 2, cy - wh[..., 1] / 2, cx + wh[..., 0] / 2, cy + wh[..., 1] / 2], axis=-1)


def _decode_tensor(t: Tensor, rows, cols, stride: int) -> Tensor:
    tx, ty, tw, th = (T.getitem(t, (slice(None), k)) for k in range(4))
    cx = (T.sigmoid(tx) + cols.astype(t.dtype)) * float(stride)
    cy = (T.sigmoid(ty) + rows.astype(t.dtype)) * float(stride)
    hw = T.exp(T.clamp(tw, -SIZE_CLAMP, SIZE_CLAMP)) * (stride / 2)
    hh = T.exp(T.clamp(th, -SIZE_CLAMP, SIZE_CLAMP)) * (stride / 2)
    parts = [cx - hw, cy - hh, cx + hw, cy + hh]
    return T.concat([T.reshape(p, (-1, 1)) for p in parts], axis=1)


# ---------------------------------------------------------------- inference

def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy hard NMS. Returns kept indices in descending-score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for rank, i in enumerate(order):
        if suppressed[rank]:
            continue
        keep.append(i)
        later = order[rank + 1:]
        suppressed[rank + 1:] |= ious[i, later] > iou_thresh
    return np.array(keep, dtype=int)


def decode_and_nms(out: HeadOutput, conf_thresh: float = 0.25, iou_thresh: float = 0.45,
                   max_det: int = 300) -> list[list[Detection]]:
    """Decode every cell, threshold ``sigmoid(obj) * max class prob`` and run class-wise NMS.

    Returns one descending-score detection list per image.
    """
    n = out.p2.shape[0]
    results = []
    for b in range(n):
        boxes, scores, classes = [], [], []
        for name, raw in out.levels():
            r = raw.data[b].astype(np.float64)
            stride = LEVEL_STRIDES[name]
            h, w = r.shape[1:]
            rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            obj = T._stable_sigmoid(r[4])
            cls_prob = T._stable_sigmoid(r[5:])
            best = cls_prob.argmax(axis=0)
            score = obj * cls_prob.max(axis=0)
            mask = score > conf_thresh
            if not mask.any():
                continue
            t = r[:4].transpose(1, 2, 0)[mask]
            boxes.append(decode_boxes(t, rows[mask], cols[mask], stride))
            scores.append(score[mask])
            classes.append(best[mask])
        if not boxes:
            results.append([])
            continue
        boxes_a = np.concatenate(boxes)
        scores_a = np.concatenate(scores)
        classes_a = np.concatenate(classes)
        kept = []
        for c in np.unique(classes_a):
            idx = np.flatnonzero(classes_a == c)
            kept.extend(idx[nms(boxes_a[idx], scores_a[idx], iou_thresh)])
        kept = np.array(kept, dtype=int)
        kept = kept[np.argsort(-scores_a[kept], kind="stable")][:max_det]
        results.append([Detection(Box(*map(float, boxes_a[k])), float(scores_a[k]), int(classes_a[k]))
                        for k in kept])
    return results


# ---------------------------------------------------------------- loss

@dataclass
class LossWeights:
    box: float = 0.2
    obj: float = 1.0
    cls: float = 0.5


def detection_loss(out: HeadOutput, targets: dict[str, LevelTargets], num_classes: int,
                   weights: LossWeights | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of mean GIoU loss (positives), objectness BCE (every cell) and class BCE (positives)."""
    weights = weights or LossWeights()
    obj_sum = None
    cells = 0
    giou_terms, cls_terms = [], []
    for name, raw in out.levels():
        tg = targets[name]
        obj_bce = T.bce_with_logits(T.getitem(raw, (slice(None), 4)), tg.obj).sum()
        obj_sum = obj_bce if obj_sum is None else obj_sum + obj_bce
        cells += tg.obj.size
        if tg.num_pos == 0:
            continue
        picked = T.getitem(raw, (tg.batch, slice(None), tg.rows, tg.cols))   # [P, 5+nc]
        pred = _decode_tensor(T.getitem(picked, (slice(None), slice(0, 4))), tg.rows, tg.cols,
                              LEVEL_STRIDES[name])
        giou_terms.append(1.0 - iou_giou(pred, tg.boxes.astype(raw.dtype))[1])
        onehot = np.zeros((tg.num_pos, num_classes))
        onehot[np.arange(tg.num_pos), tg.classes] = 1.0
        cls_terms.append(T.bce_with_logits(T.getitem(picked, (slice(None), slice(5, None))), onehot))
    obj_loss = obj_sum * (1.0 / cells)
    total = obj_loss * weights.obj
    parts = {"obj": float(obj_loss.data)}
    if giou_terms:
        box_loss = T.concat(giou_terms, axis=0).mean()
        cls_loss = T.concat(cls_terms, axis=0).mean()
        total = total + box_loss * weights.box + cls_loss * weights.cls
        parts.update(box=float(box_loss.data), cls=float(cls_loss.data))
    else:
        parts.update(box=0.0, cls=0.0)
    parts["total"] = float(total.data)
    return total, parts
