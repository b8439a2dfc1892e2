import numpy as np
import pytest

from m2s import tensor as T
from m2s.gradcheck import (COMPOSITES, PRIMITIVES, REGISTRY, TOLERANCE, CheckResult, format_table,
                           max_rel_error, relative_error, run_gradchecks)


def test_relative_error_definition():
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-7])) == pytest.approx(1e-7 / (1 + 1e-7))
    assert relative_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-4)


def test_registry_covers_required_paths():
    for name in ("conv2d", "sigmoid", "pixel_unshuffle", "bilinear_up", "style_pool", "spatial_stats",
                 "giou_loss", "bce_with_logits"):
        assert name in PRIMITIVES
    for name in ("cfn", "cam", "crm", "srm", "srm_beta", "drm", "head", "detection_loss", "cam_drm_loss"):
        assert name in COMPOSITES
    assert set(REGISTRY) == set(PRIMITIVES) | set(COMPOSITES)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_passes(name):
    (res,) = run_gradchecks(seeds=range(5), op_filter=name)
    assert res.passed, f"{name}: {res.max_rel_error:.3e}"


@pytest.mark.parametrize("name", ["crm", "srm_beta", "drm", "se", "head"])
def test_composite_passes_one_seed(name):
    (res,) = run_gradchecks(seeds=[0], op_filter=name)
    assert res.passed


@pytest.mark.parametrize("check,op", [("sigmoid", "sigmoid"), ("conv2d", "conv2d"), ("style_pool", "std")])
def test_corrupted_rule_is_caught(check, op):
    with T.tampered_gradient(op):
        (res,) = run_gradchecks(seeds=[0], op_filter=check)
    assert not res.passed
    assert res.max_rel_error > 1e-3


def test_max_rel_error_on_smooth_function():
    rng = np.random.default_rng(0)
    with T.precision(np.float64):
        x = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        err, count, skipped = max_rel_error(lambda: T.tsum(T.exp(x) * x), [x], rng)
    assert err <= TOLERANCE and count == 9 and skipped == 0


def test_max_rel_error_counts_kinks():
    rng = np.random.default_rng(0)
    with T.precision(np.float64):
        # one element sits within a step of the leaky-relu kink
        x = T.Tensor(np.array([1.0, -2.0, 3e-6]), requires_grad=True)
        err, count, skipped = max_rel_error(lambda: T.tsum(T.leaky_relu(x, 0.1)), [x], rng)
    assert skipped == 1 and count == 2 and err <= TOLERANCE


def test_unknown_filter():
    with pytest.raises(KeyError):
        run_gradchecks(op_filter="nope")


def test_table_format():
    text = format_table([CheckResult("a", 1e-8, 10, 0.1), CheckResult("b", 1e-3, 10, 0.1)])
    lines = text.splitlines()
    assert lines[0].split()[:2] == ["op", "max_rel_err"]
    assert lines[1].endswith("PASS") and lines[2].endswith("FAIL")


def test_kink_budget():
    assert not CheckResult("k", 0.0, 100, 0.0, skipped=3).passed
    assert CheckResult("k", 0.0, 100, 0.0, skipped=2).passed
