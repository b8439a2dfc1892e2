"""Dual Relationship Module and the single-input attention baselines it is compared with.

Every gated module zero-initializes the layer that produces its gate logits
by default (``neutral_gates``), so all gates start at 0.5 with full sigmoid
slope. Without normalization layers the incoming features are large enough
that randomly initialized gates start saturated.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cam import TriFeatures
from .nn import Conv2d, Linear, Module, Parameter, Resample
from .tensor import ShapeError, Tensor

BETA_INIT = 0.3


def _gate(x: Tensor, weights: Tensor) -> Tensor:
    """Scale each channel of ``x`` by a per-sample ``[n, c]`` weight."""
    n, c = weights.shape
    return x * T.reshape(weights, (n, c, 1, 1))


class ChannelRelation(Module):
    """Channel gate driven by the concatenation of an auxiliary feature and the input.

    concat -> 1x1 conv (2C->C) -> mean/std pooling -> fully connected (2C->C)
    -> sigmoid gives ``m``; the output is ``m * input``.
    """

    def __init__(self, rng, channels: int, neutral_gates: bool = True):
        self.channels = channels
        self.concat_conv = Conv2d(rng, 2 * channels, channels, 1)
        self.fc = Linear(rng, 2 * channels, channels)
        if neutral_gates:
            self.fc.zero_()

    def weights(self, x: Tensor, high: Tensor) -> Tensor:
        if high.shape != x.shape or x.shape[1] != self.channels:
            raise ShapeError(f"CRM: input {x.shape} and adapted High {high.shape} must both be "
                             f"[n,{self.channels},h,w]")
        a = self.concat_conv(T.concat([high, x], axis=1))
        avg, sd = T.style_pool(a)
        return T.sigmoid(self.fc(T.concat([avg, sd], axis=1)))

    def forward(self, x: Tensor, high: Tensor) -> Tensor:
        return _gate(x, self.weights(x, high))


class SpatialRelation(Module):
    """Spatial gate over a beta-blend of CR and Mid, plus a sigmoid offset plane from Low."""

    def __init__(self, rng, channels: int, low_channels: int, kernel: int = 7, beta: float = BETA_INIT,
                 neutral_gates: bool = True):
        self.channels = channels
        self.beta = Parameter(np.float64(beta), decay=False)
        self.stats_conv = Conv2d(rng, 2, 1, kernel)
        self.bias_conv = Conv2d(rng, low_channels, 1, 1)
        if neutral_gates:
            self.stats_conv.zero_()
            self.bias_conv.zero_()

    def forward(self, cr: Tensor, mid: Tensor, low: Tensor) -> Tensor:
        if mid.shape != cr.shape or low.shape[2:] != cr.shape[2:] or low.shape[0] != cr.shape[0]:
            raise ShapeError(f"SRM: CR {cr.shape}, adapted Mid {mid.shape} and Low {low.shape} disagree")
        w = T.sigmoid(self.stats_conv(T.spatial_stats(T.concat([cr, mid], axis=1))))
        blend = self.beta * mid + (1.0 - self.beta) * cr
        e = w * blend
        return e + T.sigmoid(self.bias_conv(low))


class DRM(Module):
    """Refine ``input`` (at pyramid level ``level``) with High, Mid and Low.

    High and Mid are resampled to the input's level and channel count; Low
    keeps its own channels and only changes resolution.
    """

    def __init__(self, rng, channels: int, level: int, tri_channels, tri_levels=(2, 3, 4),
                 beta: float = BETA_INIT, stats_kernel: int = 7, neutral_gates: bool = True):
        c_low, c_mid, c_high = tri_channels
        self.level = level
        self.high_adapt = Resample(rng, c_high, channels, tri_levels[2], level)
        self.mid_adapt = Resample(rng, c_mid, channels, tri_levels[1], level)
        self.low_adapt = Resample(rng, c_low, c_low, tri_levels[0], level)
        self.crm = ChannelRelation(rng, channels, neutral_gates)
        self.srm = SpatialRelation(rng, channels, c_low, stats_kernel, beta, neutral_gates)

    def adapt(self, x: Tensor, tri: TriFeatures):
        hw = x.shape[2:]
        return (self.high_adapt(tri.high, hw), self.mid_adapt(tri.mid, hw), self.low_adapt(tri.low, hw))

    def forward(self, x: Tensor, tri: TriFeatures) -> Tensor:
        high, mid, low = self.adapt(x, tri)
        return self.srm(self.crm(x, high), mid, low)

    def zero_attention_(self) -> "DRM":
        """Zero the attention sub-weights (concat conv, fc, stats and bias convs)."""
        self.crm.concat_conv.zero_()
        self.crm.fc.zero_()
        self.srm.stats_conv.zero_()
        self.srm.bias_conv.zero_()
        return self


class SE(Module):
    def __init__(self, rng, channels: int, reduction: int = 16, neutral_gates: bool = True):
        hidden = max(1, channels // reduction)
        self.squeeze = Linear(rng, channels, hidden)
        self.excite = Linear(rng, hidden, channels)
        if neutral_gates:
            self.excite.zero_()

    def forward(self, x: Tensor) -> Tensor:
        z = T.mean(x, axis=(2, 3))
        return _gate(x, T.sigmoid(self.excite(T.relu(self.squeeze(z)))))


class ECA(Module):
    """Channel gate from a k-tap 1-D conv across pooled channel descriptors."""

    def __init__(self, rng, channels: int, kernel: int = 3, neutral_gates: bool = True):
        self.kernel = kernel
        self.conv = Conv2d(rng, 1, 1, (kernel, 1), pad=(kernel // 2, 0), bias=False)
        if neutral_gates:
            self.conv.zero_()

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        z = T.reshape(T.mean(x, axis=(2, 3)), (n, 1, c, 1))
        return _gate(x, T.reshape(T.sigmoid(self.conv(z)), (n, c)))


class CBAM(Module):
    def __init__(self, rng, channels: int, reduction: int = 16, kernel: int = 7, neutral_gates: bool = True):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)
        self.spatial = Conv2d(rng, 2, 1, kernel)
        if neutral_gates:
            self.fc2.zero_()
            self.spatial.zero_()

    def _mlp(self, z):
        return self.fc2(T.relu(self.fc1(z)))

    def forward(self, x: Tensor) -> Tensor:
        mc = T.sigmoid(self._mlp(T.mean(x, axis=(2, 3))) + self._mlp(T.amax(x, axis=(2, 3))))
        x = _gate(x, mc)
        planes = T.concat([T.mean(x, axis=1, keepdims=True), T.amax(x, axis=1, keepdims=True)], axis=1)
        return x * T.sigmoid(self.spatial(planes))


ATTENTION_KINDS = {"se": SE, "eca": ECA, "cbam": CBAM}


def attention_baseline(rng, kind: str, channels: int, neutral_gates: bool = True) -> Module:
    if kind not in ATTENTION_KINDS:
        raise ValueError(f"unknown attention kind {kind!r}; expected one of {sorted(ATTENTION_KINDS)}")
    return ATTENTION_KINDS[kind](rng, channels, neutral_gates=neutral_gates)
