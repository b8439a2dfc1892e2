import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2s import tensor as T
from m2s.detect import (Box, DetectionHead, HeadOutput, LossWeights, assign_targets, decode_and_nms,
                        decode_boxes, detection_loss, encode_offsets, giou, giou_loss, iou, iou_giou,
                        iou_matrix, level_for, nms)
from m2s.tensor import ShapeError, Tensor
from oracles import random_int_boxes, raster_iou_giou

coord = st.floats(0, 64, allow_nan=False)


@st.composite
def boxes(draw, min_side=0.5):
    x1, y1 = draw(coord), draw(coord)
    w, h = draw(st.floats(min_side, 40)), draw(st.floats(min_side, 40))
    return Box(x1, y1, x1 + w, y1 + h)


# ---------------------------------------------------------------- geometry

def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-9)
    assert iou(a, Box(5, 5, 6, 6)) == 0.0


def test_giou_examples():
    a = Box(0, 0, 2, 2)
    assert giou(a, a) == pytest.approx(1.0)
    assert giou(Box(0, 0, 1, 1), Box(2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-9)
    assert giou(a, Box(1, 1, 3, 3)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-9)


def test_giou_loss_examples():
    assert giou_loss(Box(1, 1, 4, 5), Box(1, 1, 4, 5)) == pytest.approx(0.0, abs=1e-12)
    assert giou_loss(Box(0, 0, 1, 1), Box(2, 0, 3, 1)) == pytest.approx(4 / 3, abs=1e-9)


def test_giou_loss_grows_toward_two_with_separation():
    losses = [giou_loss(Box(0, 0, 1, 1), Box(d, 0, d + 1, 1)) for d in (2, 4, 8, 16, 64, 1024)]
    assert all(b > a for a, b in zip(losses, losses[1:]))
    assert 1.99 < losses[-1] < 2


def test_degenerate_boxes_are_zero():
    assert iou(Box(1, 1, 1, 3), Box(0, 0, 4, 4)) == 0.0


def test_unnormalized_boxes_are_normalized():
    assert iou(Box(2, 2, 0, 0), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-9)


@given(boxes(), boxes())
def test_geometry_invariants(a, b):
    i, g = iou(a, b), giou(a, b)
    assert 0.0 <= i <= 1.0 + 1e-12
    assert -1.0 < g <= i + 1e-12
    assert 0.0 <= giou_loss(a, b) < 2.0
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)


@given(boxes(), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_giou_equals_iou_when_nested(outer, fx1, fy1, fx2, fy2):
    w, h = outer.x2 - outer.x1, outer.y2 - outer.y1
    xa, xb = sorted((outer.x1 + fx1 * w, outer.x1 + fx2 * w))
    ya, yb = sorted((outer.y1 + fy1 * h, outer.y1 + fy2 * h))
    inner = Box(xa, ya, xb, yb)
    assert giou(outer, inner) == pytest.approx(iou(outer, inner), abs=1e-9)


def test_raster_oracle_on_random_pairs():
    rng = np.random.default_rng(11)
    a, b = random_int_boxes(rng, 2000), random_int_boxes(rng, 2000)
    ri, rg = raster_iou_giou(a, b)
    with T.precision(np.float64), T.no_grad():
        i, g = iou_giou(a, b)
    assert np.max(np.abs(i.data - ri)) <= 1e-3
    assert np.max(np.abs(g.data - rg)) <= 1e-3


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(2)
    a, b = random_int_boxes(rng, 6), random_int_boxes(rng, 5)
    m = iou_matrix(a, b)
    for i in range(6):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou(Box(*a[i]), Box(*b[j])), abs=1e-12)


# ---------------------------------------------------------------- head

def test_head_shapes(rng):
    head = DetectionHead(rng, (8, 12, 16), num_classes=2)
    out = head(Tensor(rng.standard_normal((1, 8, 16, 16))), Tensor(rng.standard_normal((1, 12, 8, 8))),
               Tensor(rng.standard_normal((1, 16, 4, 4))))
    assert [o.shape for o in out] == [(1, 7, 16, 16), (1, 7, 8, 8), (1, 7, 4, 4)]


def test_head_rejects_bad_strides(rng):
    head = DetectionHead(rng, (4, 4, 4), num_classes=1)
    xs = [Tensor(np.zeros((1, 4, s, s))) for s in (16, 8, 8)]
    with pytest.raises(ShapeError):
        head(*xs)


def test_zero_projection_gives_half_objectness(rng):
    head = DetectionHead(rng, (4, 4, 4), num_classes=2)
    for h in head.heads.values():
        h.proj.zero_()
    out = head(*(Tensor(rng.standard_normal((1, 4, s, s))) for s in (16, 8, 4)))
    for _, raw in out.levels():
        np.testing.assert_allclose(T.sigmoid(T.getitem(raw, (slice(None), 4))).data, 0.5)
    # score is objectness times the best class probability
    assert decode_and_nms(out, conf_thresh=0.2499)[0][0].score == pytest.approx(0.25)
    assert decode_and_nms(out, conf_thresh=0.25) == [[]]


# ---------------------------------------------------------------- targets

def test_assign_single_small_box():
    t = assign_targets([[(Box(6, 6, 14, 14), 1)]], (64, 64))
    assert t["p2"].num_pos == 1
    assert (t["p2"].rows[0], t["p2"].cols[0]) == (2, 2)
    assert t["p2"].obj.sum() == 1 and t["p2"].obj[0, 2, 2] == 1
    assert t["p3"].num_pos == 0 and t["p4"].num_pos == 0


def test_assign_empty():
    t = assign_targets([[]], (64, 64))
    assert all(v.num_pos == 0 and not v.obj.any() for v in t.values())


def test_assign_larger_area_wins():
    small, big = Box(9, 9, 11, 11), Box(5, 5, 15, 15)
    for order in ([(small, 0), (big, 1)], [(big, 1), (small, 0)]):
        t = assign_targets([order], (64, 64))["p2"]
        assert t.num_pos == 1 and t.classes[0] == 1


@pytest.mark.parametrize("side,level", [(4, "p2"), (15.9, "p2"), (16, "p3"), (31, "p3"), (32, "p4"), (60, "p4")])
def test_level_brackets(side, level):
    assert level_for(Box(0, 0, side, 2)) == level


@settings(max_examples=100)
@given(st.floats(0.5, 63.5), st.floats(0.5, 63.5), st.floats(1, 40), st.floats(1, 40))
def test_encode_decode_roundtrip(cx, cy, w, h):
    box = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    name = level_for(box)
    t = assign_targets([[(box, 0)]], (64, 64))[name]
    stride = {"p2": 4, "p3": 8, "p4": 16}[name]
    row, col = int(t.rows[0]), int(t.cols[0])
    frac = (cx / stride - col, cy / stride - row)
    if min(frac) < 1e-3 or max(frac) > 1 - 1e-3:
        return  # centre on a cell edge; sigmoid cannot reach it exactly
    dec = decode_boxes(encode_offsets(box, row, col, stride), row, col, stride)
    np.testing.assert_allclose(dec, box.as_array(), atol=1e-4)


def test_decode_zero_offsets_at_cell():
    np.testing.assert_allclose(decode_boxes(np.zeros(4), 2, 2, 4), [8, 8, 12, 12])


# ---------------------------------------------------------------- decode and nms

def _level_maps(nc=1, fill=-40.0, n=1):
    return HeadOutput(*(Tensor(np.full((n, 5 + nc, s, s), fill)) for s in (16, 8, 4)))


def test_all_negative_objectness_is_empty():
    assert decode_and_nms(_level_maps()) == [[]]


def test_single_positive_cell_decodes():
    out = _level_maps(nc=2)
    out.p2.data[0, :4, 2, 2] = 0.0
    out.p2.data[0, 4, 2, 2] = 40.0
    out.p2.data[0, 6, 2, 2] = 40.0
    (det,), = decode_and_nms(out)
    assert det.class_id == 1
    b = det.box
    assert ((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2) == (10.0, 10.0)
    assert (b.x2 - b.x1, b.y2 - b.y1) == (4.0, 4.0)


def test_nms_duplicate_suppression():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    keep = nms(boxes, np.array([0.8, 0.9]), 0.45)
    assert keep.tolist() == [1]


def test_nms_keeps_distinct_classes():
    out = _level_maps(nc=2)
    for k, cls in ((2, 5), (3, 6)):
        out.p2.data[0, :4, 2, k] = 0.0
        out.p2.data[0, 4, 2, k] = 40.0
        out.p2.data[0, cls, 2, k] = 40.0
    assert len(decode_and_nms(out, iou_thresh=0.0)[0]) == 2


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_nms_invariants(seed, thresh):
    rng = np.random.default_rng(seed)
    out = HeadOutput(*(Tensor(rng.normal(0, 2, (1, 7, s, s))) for s in (16, 8, 4)))
    dets = decode_and_nms(out, conf_thresh=0.3, iou_thresh=thresh, max_det=50)[0]
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert len(dets) <= 50
    for c in {d.class_id for d in dets}:
        same = np.array([d.box.as_array() for d in dets if d.class_id == c])
        m = iou_matrix(same, same)
        np.fill_diagonal(m, 0)
        assert (m <= thresh + 1e-12).all()


# ---------------------------------------------------------------- loss

def test_perfect_prediction_loss(f64):
    gts = [[(Box(6, 6, 14, 14), 0), (Box(30, 37, 40, 49), 1)]]
    targets = assign_targets(gts, (64, 64))
    out = _level_maps(nc=2)
    for name, raw in out.levels():
        tg = targets[name]
        stride = {"p2": 4, "p3": 8, "p4": 16}[name]
        for b, i, j, box, c in zip(tg.batch, tg.rows, tg.cols, tg.boxes, tg.classes):
            raw.data[b, :4, i, j] = encode_offsets(Box(*box), i, j, stride)
            raw.data[b, 4, i, j] = 40.0
            raw.data[b, 5 + c, i, j] = 40.0
    loss, parts = detection_loss(out, targets, 2)
    assert loss.item() < 1e-10
    assert parts["box"] < 1e-10


def test_background_loss_is_ln2(f64):
    out = _level_maps(nc=3, fill=0.0, n=2)
    loss, parts = detection_loss(out, assign_targets([[], []], (64, 64)), 3)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
    assert parts["box"] == 0.0 and parts["cls"] == 0.0


def test_loss_weights_scale_terms(f64):
    rng = np.random.default_rng(0)
    out = HeadOutput(*(Tensor(rng.normal(0, 1, (1, 6, s, s))) for s in (16, 8, 4)))
    targets = assign_targets([[(Box(6, 6, 14, 14), 0)]], (64, 64))
    _, parts = detection_loss(out, targets, 1, LossWeights(1, 1, 1))
    total, _ = detection_loss(out, targets, 1, LossWeights(2.0, 3.0, 0.5))
    assert total.item() == pytest.approx(2 * parts["box"] + 3 * parts["obj"] + 0.5 * parts["cls"], rel=1e-12)


def test_loss_gradient_reaches_positive_cells(f64):
    rng = np.random.default_rng(1)
    raws = [Tensor(rng.normal(0, 1, (1, 6, s, s)), requires_grad=True) for s in (16, 8, 4)]
    targets = assign_targets([[(Box(6, 6, 14, 14), 0)]], (64, 64))
    loss, _ = detection_loss(HeadOutput(*raws), targets, 1)
    T.backward(loss)
    g = raws[0].grad
    # a nested pair has no centre gradient, so only ask for some box signal
    assert np.abs(g[0, :4, 2, 2]).max() > 0
    assert not g[0, :4].sum(axis=0)[np.arange(16) != 2].any()
