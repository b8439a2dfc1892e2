import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2s.cam import CAM, CamNode, CamPlan, CrossScaleFusionNode, PlanError
from m2s.nn import Backbone
from m2s.tensor import ShapeError, Tensor


def _x(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _cfn_inputs(rng):
    return _x(rng, 1, 32, 16, 16), _x(rng, 1, 64, 8, 8), _x(rng, 1, 128, 4, 4)


def test_cfn_shape(rng):
    node = CrossScaleFusionNode(rng, 32, 64, 128, 64)
    assert node(*_cfn_inputs(rng)).shape == (1, 64, 8, 8)


def test_cfn_fuse_width(rng):
    node = CrossScaleFusionNode(rng, 32, 64, 128, 64)
    assert node.fuse_channels == 64 + 64 + 64
    assert node.fuse.reduce.weight.shape[1] == 192


def test_cfn_zero_weights_zero_inputs(rng):
    node = CrossScaleFusionNode(rng, 8, 8, 8, 8)
    for p in node.parameters():
        p.data[...] = 0
    node.fuse.residual = False
    y = node(Tensor(np.zeros((1, 8, 8, 8))), Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 2, 2))))
    assert not y.data.any()


@pytest.mark.parametrize("shapes", [((1, 8, 12, 12), (1, 8, 4, 4), (1, 8, 2, 2)),
                                    ((1, 8, 8, 8), (1, 8, 4, 4), (1, 8, 4, 4))])
def test_cfn_rejects_bad_ratios(rng, shapes):
    node = CrossScaleFusionNode(rng, 8, 8, 8, 8)
    with pytest.raises(ShapeError):
        node(*(_x(rng, *s) for s in shapes))


@settings(max_examples=10)
@given(st.integers(0, 2), st.integers(0, 10_000))
def test_cfn_depends_on_every_input(which, seed):
    rng = np.random.default_rng(seed)
    node = CrossScaleFusionNode(rng, 4, 6, 8, 6)
    xs = [_x(rng, 1, 4, 8, 8), _x(rng, 1, 6, 4, 4), _x(rng, 1, 8, 2, 2)]
    base = node(*xs).data
    bumped = list(xs)
    bumped[which] = Tensor(xs[which].data + rng.standard_normal(xs[which].shape))
    assert not np.array_equal(node(*bumped).data, base)


def test_default_plan_layout():
    plan = CamPlan.v_shape()
    plan.validate()
    assert [n.level for n in plan.nodes] == [4, 3, 2, 3, 4]
    assert plan.taps == {"low": "N2", "mid": "N3", "high": "N4"}
    sides = {s for n in plan.nodes for s in (n.left, n.right)}
    assert {"C1", "C5"} <= sides


def test_plan_chains_middle_inputs():
    plan = CamPlan.v_shape()
    # bottom-up nodes reuse the top-down output at their own level
    assert plan.nodes[3].middle == "N1"
    assert plan.nodes[4].middle == "N0"
    assert plan.nodes[3].left == "N2"


def test_single_node_plan_fails_validation():
    plan = CamPlan([CamNode(3, "C2", "C3", "C4")], {"mid": "N0"})
    with pytest.raises(PlanError, match="low"):
        plan.validate()


@pytest.mark.parametrize("node", [CamNode(3, "N0", "C3", "C4"), CamNode(3, "C1", "C3", "C4"),
                                  CamNode(5, "C4", "C5", "C5"), CamNode(3, "C2", "X3", "C4")])
def test_plan_rejects_bad_sources(node):
    plan = CamPlan([node], {"low": "C2", "mid": "N0", "high": "C4"})
    with pytest.raises(PlanError):
        plan.validate()


def test_plan_roundtrip():
    plan = CamPlan.v_shape()
    assert CamPlan.from_dict(plan.to_dict()) == plan


def test_cam_default_shapes(rng):
    bb = Backbone(rng)
    cam = CAM(rng, bb.channels)
    tri = cam(bb(_x(rng, 1, 3, 64, 64)))
    assert [t.shape for t in tri] == [(1, 64, 16, 16), (1, 128, 8, 8), (1, 256, 4, 4)]
    assert cam.out_channels == (64, 128, 256)


def test_cam_deterministic():
    img = np.random.default_rng(9).standard_normal((1, 3, 64, 64))
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        bb = Backbone(rng, channels=(4, 8, 8, 8, 8))
        cam = CAM(rng, bb.channels, out_channels=(8, 8, 8))
        outs.append(cam(bb(Tensor(img))))
    for a, b in zip(*outs):
        assert a.data.tobytes() == b.data.tobytes()
