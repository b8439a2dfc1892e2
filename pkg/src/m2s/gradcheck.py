"""Central finite-difference checks of every differentiable op and the composite paths.

Each check builds float64 inputs from a seed, reduces the op output to a
scalar with a fixed random projection, and compares the analytic gradient of
every (or a sampled subset of) input element against
``(f(x + h) - f(x - h)) / 2h`` with ``h = 1e-5``. The error of one element is
``|a - n| / max(|a|, |n|, 1e-8)``.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cam import CAM, CrossScaleFusionNode, TriFeatures
from .config import ModelConfig
from .detect import LEVEL_STRIDES, Box, DetectionHead, assign_targets, detection_loss, giou_loss
from .drm import CBAM, DRM, ECA, SE, ChannelRelation, SpatialRelation
from .model import M2SDetector
from .nn import BlockConfig, Bottleneck, FeaturePyramid, Focus, Module

STEP = 1e-5
# reference precision for the difference quotients (80-bit on x86; equals float64 elsewhere)
FD_DTYPE = np.longdouble
TOLERANCE = 1e-6
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
MAX_SKIP_FRACTION = 0.02


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    seconds: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        # a check that skips many probes is not evidence of anything
        return self.max_rel_error <= TOLERANCE and self.skipped <= MAX_SKIP_FRACTION * (self.checked + self.skipped)


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def max_rel_error(fn: Callable[[], T.Tensor], inputs: list[T.Tensor], rng: np.random.Generator,
                  max_elems: int | None = None, step: float = STEP) -> tuple[float, int, int]:
    """Compare analytic and central-difference gradients of scalar ``fn()`` w.r.t. ``inputs``.

    Returns ``(worst error, elements compared, elements skipped)``. An element
    is skipped when the +h or -h probe lands on a different piece of a
    piecewise-linear op than the unperturbed pass; the difference quotient
    then spans a kink and says nothing about the derivative.
    """
    for t in inputs:
        t.grad = None
    with T.branch_monitor() as base:
        loss = fn()
    T.backward(loss)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    with _extended(inputs):
        return _compare(fn, inputs, grads, base, rng, max_elems, step)


@contextlib.contextmanager
def _extended(inputs):
    """Evaluate probes in extended precision; analytic gradients stay as computed."""
    saved = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(FD_DTYPE)
    try:
        with T.precision(FD_DTYPE):
            yield
    finally:
        for t, d in zip(inputs, saved):
            t.data = d


def _compare(fn, inputs, grads, base, rng, max_elems, step):
    worst, count, skipped = 0.0, 0, 0
    for t, analytic in zip(inputs, grads):
        flat = np.arange(t.data.size)
        if max_elems is not None and t.data.size > max_elems:
            flat = rng.choice(t.data.size, size=max_elems, replace=False)
        for k in flat:
            idx = np.unravel_index(k, t.data.shape)
            orig = t.data[idx]
            with T.no_grad():
                t.data[idx] = orig + step
                with T.branch_monitor() as up:
                    fp = np.longdouble(fn().data)
                t.data[idx] = orig - step
                with T.branch_monitor() as down:
                    fm = np.longdouble(fn().data)
            t.data[idx] = orig
            if not (_same_branches(base, up) and _same_branches(base, down)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, float(relative_error(analytic[idx], numeric)))
            count += 1
    return worst, count, skipped


def _leaf(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05):
    # keeps leaky-relu / max / clamp inputs clear of their kinks
    x = rng.normal(0, 1, size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)
    return T.Tensor(x, requires_grad=True)


def _project(out: T.Tensor, rng) -> Callable[[T.Tensor], T.Tensor]:
    # projecting the change y - y0 has the same gradient as projecting y, but
    # keeps the scalar near zero so its own rounding does not swamp f(x+h) - f(x-h)
    r = rng.normal(0, 1, size=out.shape)
    y0 = out.data.copy()
    return lambda y: ((y - y0) * r).sum()


def _op_check(build: Callable, max_elems=None):
    """``build(rng) -> (forward, inputs)``; forward returns the op output."""
    def run(seed: int) -> tuple[float, int]:
        rng = np.random.default_rng(seed)
        forward, inputs = build(rng)
        proj = _project(forward(), rng)
        return max_rel_error(lambda: proj(forward()), inputs, rng, max_elems)
    return run


def _module_params(m: Module, extra=()) -> list[T.Tensor]:
    return [p for _, p in m.named_parameters()] + list(extra)


# ---------------------------------------------------------------- primitive ops

def _conv(rng, stride, pad, k):
    x, w, b = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, k, k), _leaf(rng, 4)
    return (lambda: T.conv2d(x, w, b, stride, pad)), [x, w, b]


def _binary(op, positive_b=False):
    def build(rng):
        a = _leaf(rng, 2, 3, 4, 4)
        b = T.Tensor(rng.uniform(0.5, 2.0, size=(1, 3, 1, 4)) if positive_b else rng.normal(size=(1, 3, 1, 4)),
                     requires_grad=True)
        return (lambda: op(a, b)), [a, b]
    return build


def _minmax(op):
    def build(rng):
        a = _leaf(rng, 3, 5)
        b = T.Tensor(a.data + np.where(rng.random((3, 5)) < 0.5, -1, 1) * rng.uniform(0.1, 1, (3, 5)),
                     requires_grad=True)
        return (lambda: op(a, b)), [a, b]
    return build


def _giou_build(rng):
    # pairs with partial overlap, disjoint pairs and containment
    xy = rng.uniform(0, 10, size=(6, 2))
    wh = rng.uniform(1, 5, size=(6, 2))
    a = T.Tensor(np.concatenate([xy, xy + wh], axis=1), requires_grad=True)
    shift = rng.uniform(-3, 3, size=(6, 2))
    wh2 = rng.uniform(1, 5, size=(6, 2))
    b = T.Tensor(np.concatenate([xy + shift, xy + shift + wh2], axis=1), requires_grad=True)
    return (lambda: giou_loss(a, b)), [a, b]


def _style_pool_build(rng):
    x = _leaf(rng, 2, 3, 4, 5)
    return (lambda: T.concat(list(T.style_pool(x)), axis=1)), [x]


PRIMITIVES: dict[str, Callable] = {
    "conv2d": _op_check(lambda rng: _conv(rng, 1, 1, 3)),
    "conv2d_stride2": _op_check(lambda rng: _conv(rng, 2, 1, 3)),
    "conv2d_1x1": _op_check(lambda rng: _conv(rng, 1, 0, 1)),
    "sigmoid": _op_check(lambda rng: (lambda x: ((lambda: T.sigmoid(x)), [x]))(_leaf(rng, 2, 3, 4, 4, scale=2))),
    "leaky_relu": _op_check(lambda rng: (lambda x: ((lambda: T.leaky_relu(x)), [x]))(_away_from_zero(rng, 2, 3, 4, 4))),
    "exp": _op_check(lambda rng: (lambda x: ((lambda: T.exp(x)), [x]))(_leaf(rng, 2, 3, 4, 4))),
    "clamp": _op_check(lambda rng: (lambda x: ((lambda: T.clamp(x, -0.5, 0.5)), [x]))(
        T.Tensor(np.concatenate([rng.uniform(-0.45, 0.45, 20), rng.uniform(0.6, 2, 10), rng.uniform(-2, -0.6, 10)]),
                 requires_grad=True))),
    "pixel_unshuffle": _op_check(lambda rng: (lambda x: ((lambda: T.pixel_unshuffle(x, 2)), [x]))(_leaf(rng, 2, 3, 4, 6))),
    "bilinear_up": _op_check(lambda rng: (lambda x: ((lambda: T.bilinear_resize(x, 8, 6)), [x]))(_leaf(rng, 2, 2, 4, 3))),
    "bilinear_down": _op_check(lambda rng: (lambda x: ((lambda: T.bilinear_resize(x, 3, 2)), [x]))(_leaf(rng, 2, 2, 6, 5))),
    "style_pool": _op_check(_style_pool_build),
    "spatial_stats": _op_check(lambda rng: (lambda x: ((lambda: T.spatial_stats(x)), [x]))(_leaf(rng, 2, 4, 3, 3))),
    "amax": _op_check(lambda rng: (lambda x: ((lambda: T.amax(x, axis=(2, 3))), [x]))(_leaf(rng, 2, 3, 4, 4))),
    "mean_sum": _op_check(lambda rng: (lambda x: ((lambda: T.mean(x, axis=1) + T.tsum(x, axis=(1, 2))[:, None]), [x]))(
        _leaf(rng, 2, 3, 4))),
    "add_broadcast": _op_check(_binary(T.add)),
    "mul_broadcast": _op_check(_binary(T.mul)),
    "div_broadcast": _op_check(_binary(T.div, positive_b=True)),
    "maximum": _op_check(_minmax(T.maximum)),
    "minimum": _op_check(_minmax(T.minimum)),
    "matmul": _op_check(lambda rng: (lambda a, b: ((lambda: T.matmul(a, b)), [a, b]))(_leaf(rng, 3, 4), _leaf(rng, 4, 5))),
    "concat": _op_check(lambda rng: (lambda a, b: ((lambda: T.concat([a, b], axis=1)), [a, b]))(
        _leaf(rng, 2, 3, 2, 2), _leaf(rng, 2, 1, 2, 2))),
    "getitem": _op_check(lambda rng: (lambda x: ((lambda: T.getitem(x, (np.array([0, 1, 1]), slice(None), np.array([2, 0, 2])))), [x]))(
        _leaf(rng, 2, 3, 4))),
    "reshape_transpose": _op_check(lambda rng: (lambda x: ((lambda: T.transpose(T.reshape(x, (6, 4)), (1, 0))), [x]))(
        _leaf(rng, 2, 3, 4))),
    "bce_with_logits": _op_check(lambda rng: (lambda x, t: ((lambda: T.bce_with_logits(x, t)), [x]))(
        _leaf(rng, 3, 4, scale=3), rng.random((3, 4)))),
    "giou_loss": _op_check(_giou_build),
}


# ---------------------------------------------------------------- blocks and composites

def _focus(rng):
    m = Focus(rng, BlockConfig(2, 5))
    x = _leaf(rng, 1, 2, 4, 4)
    return (lambda: m(x)), [x] + _module_params(m)


def _bottleneck(rng):
    m = Bottleneck(rng, BlockConfig(4, 4))
    x = _leaf(rng, 1, 4, 4, 4)
    return (lambda: m(x)), [x] + _module_params(m)


def _cfn(rng):
    m = CrossScaleFusionNode(rng, 2, 3, 4, 4)
    a, b, c = _leaf(rng, 1, 2, 8, 8), _leaf(rng, 1, 3, 4, 4), _leaf(rng, 1, 4, 2, 2)
    return (lambda: m(a, b, c)), [a, b, c] + _module_params(m)


def _pyramid(rng, chans, size=32):
    return FeaturePyramid(*(_leaf(rng, 1, c, size >> k, size >> k) for k, c in enumerate(chans, 1)))


def _cam(rng):
    chans = (2, 2, 3, 3, 4)
    m = CAM(rng, chans, (3, 3, 4))
    pyr = _pyramid(rng, chans)
    return (lambda: T.concat([T.reshape(t, (1, -1)) for t in m(pyr)], axis=1)), list(pyr) + _module_params(m)


def _tri(rng, chans=(3, 4, 5), size=8, batch=1):
    return TriFeatures(_leaf(rng, batch, chans[0], size, size), _leaf(rng, batch, chans[1], size // 2, size // 2),
                       _leaf(rng, batch, chans[2], size // 4, size // 4))


def _crm(rng):
    m = ChannelRelation(rng, 3, neutral_gates=False)
    x, h = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4)
    return (lambda: m(x, h)), [x, h] + _module_params(m)


def _srm(rng):
    m = SpatialRelation(rng, 3, 2, kernel=3, neutral_gates=False)
    m.beta.data[...] = 0.3 + rng.uniform(-0.1, 0.1)
    cr, mid, low = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 2, 4, 4)
    return (lambda: m(cr, mid, low)), [cr, mid, low] + _module_params(m)


def _srm_beta(rng):
    m = SpatialRelation(rng, 3, 2, kernel=3, neutral_gates=False)
    cr, mid, low = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 2, 4, 4)
    return (lambda: m(cr, mid, low)), [m.beta]


def _drm(rng):
    tri = _tri(rng)
    m = DRM(rng, 3, 2, (3, 4, 5), stats_kernel=3, neutral_gates=False)
    return (lambda: m(tri.low, tri)), list(tri) + _module_params(m)


def _attention(kind):
    def build(rng):
        # CBAM sums two MLP branches; a small input keeps its gates out of saturation
        m = {"se": SE, "eca": ECA, "cbam": CBAM}[kind](rng, 8, neutral_gates=False,
                                                            **({"reduction": 2} if kind != "eca" else {}))
        x = _leaf(rng, 2, 8, 5, 5, scale=0.5 if kind == "cbam" else 1.0)
        return (lambda: m(x)), [x] + _module_params(m)
    return build


def _head(rng):
    m = DetectionHead(rng, (3, 4, 5), num_classes=2, width=3)
    tri = _tri(rng)
    return (lambda: T.concat([T.reshape(o, (1, -1)) for o in m(*tri)], axis=1)), list(tri) + _module_params(m)


def _tiny_model_cfg(**over) -> ModelConfig:
    base = dict(backbone_channels=[2, 3, 3, 4, 4], cam_channels=[3, 4, 4], head_width=3, num_classes=2)
    base.update(over)
    return ModelConfig(**base)


def _loss_targets(rng, size=32, brackets=((4, 14), (18, 30)), per_bracket=1):
    """Two images with ``per_bracket`` boxes per size bracket, so every listed level has positives."""
    gts = []
    for _ in range(2):
        items = []
        for lo, hi in [b for b in brackets for _ in range(per_bracket)]:
            w, h = rng.uniform(lo, hi, size=2)
            x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
            items.append((Box(x, y, x + w, y + h), int(rng.integers(2))))
        gts.append(items)
    return assign_targets(gts, (size, size))


def _detection_loss(rng):
    m = DetectionHead(rng, (3, 4, 5), num_classes=2, width=3)
    brackets = ((8, 12), (20, 28), (36, 46))
    for (lo, hi), level in zip(brackets, ("p2", "p3", "p4")):
        # predicted sizes near the target sizes give partial overlaps; a box nested
        # inside (or around) its target has exactly zero gradient for its center
        proj = m.heads[level].proj
        proj.weight.data[...] = rng.normal(0, 0.3, size=proj.weight.shape)
        proj.weight.data[:2] *= 5.0
        proj.weight.data[2:4] *= 0.2
        proj.bias.data[2:4] = np.log((lo + hi) / 2 / LEVEL_STRIDES[level])
    targets = _loss_targets(rng, 64, brackets, per_bracket=4)
    tri = _tri(rng, size=16, batch=2)
    return (lambda: detection_loss(m(*tri), targets, 2)[0]), _module_params(m)


def _composite(rng):
    """Image -> backbone -> CAM -> DRM -> heads -> detection loss, w.r.t. a parameter subset."""
    model = M2SDetector(_tiny_model_cfg(), seed=int(rng.integers(1 << 30)))
    for n, p in model.named_parameters():
        if any(k in n for k in (".fc.", "stats_conv", "bias_conv")):
            # gate layers start at zero in the model; random values exercise the full chain
            p.data[...] = rng.normal(0, 0.3, size=p.shape)
    image = T.Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)))
    targets = _loss_targets(rng, 32)
    params = [p for n, p in model.named_parameters()
              if n.startswith(("cam.", "refine.", "head.heads.p2.proj"))]
    take = rng.choice(len(params), size=min(12, len(params)), replace=False)
    chosen = [params[k] for k in sorted(take)]
    return (lambda: detection_loss(model(image), targets, 2)[0]), chosen


def _scalar_check(build, max_elems=None):
    def run(seed):
        rng = np.random.default_rng(seed)
        forward, inputs = build(rng)
        return max_rel_error(forward, inputs, rng, max_elems)
    return run


COMPOSITES: dict[str, Callable] = {
    "focus_block": _op_check(_focus),
    "bottleneck": _op_check(_bottleneck),
    "cfn": _op_check(_cfn, max_elems=40),
    "cam": _op_check(_cam, max_elems=12),
    "crm": _op_check(_crm),
    "srm": _op_check(_srm),
    "srm_beta": _op_check(_srm_beta),
    "drm": _op_check(_drm, max_elems=30),
    "se": _op_check(_attention("se")),
    "eca": _op_check(_attention("eca")),
    "cbam": _op_check(_attention("cbam"), max_elems=40),
    "head": _op_check(_head, max_elems=30),
    "detection_loss": _scalar_check(_detection_loss, max_elems=20),
    "cam_drm_loss": _scalar_check(_composite, max_elems=3),
}

REGISTRY: dict[str, Callable] = {**PRIMITIVES, **COMPOSITES}


def run_gradchecks(seeds=DEFAULT_SEEDS, op_filter: str | None = None) -> list[CheckResult]:
    names = [n for n in REGISTRY if op_filter is None or n == op_filter]
    if op_filter is not None and not names:
        raise KeyError(f"no gradient check named {op_filter!r}; known: {', '.join(REGISTRY)}")
    results = []
    with T.precision(np.float64):
        for name in names:
            t0 = time.perf_counter()
            worst, count, skipped = 0.0, 0, 0
            for seed in seeds:
                err, n, k = REGISTRY[name](seed)
                worst, count, skipped = max(worst, err), count + n, skipped + k
            results.append(CheckResult(name, worst, count, time.perf_counter() - t0, skipped))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'op':<20} {'max_rel_err':>12} {'elems':>6} {'kinks':>6}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.max_rel_error:>12.3e} {r.checked:>6} {r.skipped:>6}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
