"""Cross-scale Aggregation Module: a V-shaped chain of cross-scale fusion nodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from . import tensor as T
from .nn import BlockConfig, Bottleneck, Conv2d, FeaturePyramid, Focus, Module
from .tensor import ShapeError, Tensor

TAP_LEVELS = {"low": 2, "mid": 3, "high": 4}


class TriFeatures(NamedTuple):
    low: Tensor   # stride 4
    mid: Tensor   # stride 8
    high: Tensor  # stride 16


class PlanError(ValueError):
    pass


@dataclass
class CamNode:
    level: int
    left: str
    middle: str
    right: str


@dataclass
class CamPlan:
    """Ordered fusion nodes plus the taps that become Low/Mid/High.

    Sources are ``"C1".."C5"`` for backbone features or ``"N<k>"`` for the
    output of the k-th node (always at that node's level).
    """

    nodes: list[CamNode]
    taps: dict[str, str] = field(default_factory=dict)

    @classmethod
    def v_shape(cls, top_down=(4, 3, 2), bottom_up=(3, 4)) -> "CamPlan":
        """Chain nodes so every input is the most recent feature at its level."""
        latest = {k: f"C{k}" for k in range(1, 6)}
        nodes = []
        for i in list(top_down) + list(bottom_up):
            nodes.append(CamNode(i, latest[i - 1], latest[i], latest[i + 1]))
            latest[i] = f"N{len(nodes) - 1}"
        low = next(f"N{k}" for k, n in enumerate(nodes) if n.level == 2)
        taps = {"low": low, "mid": latest[3], "high": latest[4]}
        return cls(nodes, taps)

    def source_level(self, src: str, upto: int) -> int:
        if len(src) >= 2 and src[0] == "C" and src[1:].isdigit() and 1 <= int(src[1:]) <= 5:
            return int(src[1:])
        if len(src) >= 2 and src[0] == "N" and src[1:].isdigit():
            k = int(src[1:])
            if k >= upto:
                raise PlanError(f"source {src} is not produced before it is consumed")
            return self.nodes[k].level
        raise PlanError(f"unknown feature source {src!r}")

    def validate(self) -> None:
        if not self.nodes:
            raise PlanError("CAM plan has no nodes")
        for k, node in enumerate(self.nodes):
            if not 2 <= node.level <= 4:
                raise PlanError(f"node {k}: level {node.level} outside 2..4")
            for src, want in ((node.left, node.level - 1), (node.middle, node.level),
                              (node.right, node.level + 1)):
                got = self.source_level(src, k)
                if got != want:
                    raise PlanError(f"node {k} at level {node.level}: source {src} is at level {got}, "
                                    f"expected {want}")
        for name, lvl in TAP_LEVELS.items():
            if name not in self.taps:
                raise PlanError(f"CAM plan has no {name!r} tap")
            got = self.source_level(self.taps[name], len(self.nodes))
            if got != lvl:
                raise PlanError(f"tap {name!r} -> {self.taps[name]} is at level {got}, expected {lvl}")

    def to_dict(self) -> dict:
        return {"nodes": [[n.level, n.left, n.middle, n.right] for n in self.nodes],
                "taps": dict(self.taps)}

    @classmethod
    def from_dict(cls, d: dict) -> "CamPlan":
        return cls([CamNode(int(a), b, c, e) for a, b, c, e in d["nodes"]], dict(d["taps"]))


class CrossScaleFusionNode(Module):
    """Fuse three adjacent levels into the middle level's resolution.

    The finer input is FOCUS-downsampled, the coarser one goes through a 1x1
    conv and bilinear upsampling; both are concatenated with the middle input
    and passed through one bottleneck.
    """

    def __init__(self, rng, c_low: int, c_mid: int, c_high: int, out_channels: int):
        self.focus = Focus(rng, BlockConfig(c_low, out_channels))
        self.lateral = Conv2d(rng, c_high, out_channels, 1)
        self.fuse_channels = 2 * out_channels + c_mid
        self.fuse = Bottleneck(rng, BlockConfig(self.fuse_channels, out_channels))

    def forward(self, c_low: Tensor, c_mid: Tensor, c_high: Tensor) -> Tensor:
        h, w = c_mid.shape[2:]
        if c_low.shape[2:] != (2 * h, 2 * w) or (2 * c_high.shape[2], 2 * c_high.shape[3]) != (h, w):
            raise ShapeError(f"CFN needs extents in ratio 2:1:1/2, got {c_low.shape[2:]}, "
                             f"{c_mid.shape[2:]}, {c_high.shape[2:]}")
        down = self.focus(c_low)
        up = T.bilinear_resize(self.lateral(c_high), h, w)
        return self.fuse(T.concat([down, c_mid, up], axis=1))


class CAM(Module):
    def __init__(self, rng, backbone_channels, out_channels=(64, 128, 256), plan: CamPlan | None = None):
        self.plan = plan or CamPlan.v_shape()
        self.plan.validate()
        level_out = {2: out_channels[0], 3: out_channels[1], 4: out_channels[2]}
        chans = {f"C{k}": backbone_channels[k - 1] for k in range(1, 6)}
        self.nodes = []
        for k, node in enumerate(self.plan.nodes):
            self.nodes.append(CrossScaleFusionNode(
                rng, chans[node.left], chans[node.middle], chans[node.right], level_out[node.level]))
            chans[f"N{k}"] = level_out[node.level]
        self.out_channels = tuple(chans[self.plan.taps[t]] for t in ("low", "mid", "high"))

    def forward(self, pyr: FeaturePyramid) -> TriFeatures:
        feats = {f"C{k}": pyr.level(k) for k in range(1, 6)}
        for k, (node, cfn) in enumerate(zip(self.plan.nodes, self.nodes)):
            feats[f"N{k}"] = cfn(feats[node.left], feats[node.middle], feats[node.right])
        return TriFeatures(*(feats[self.plan.taps[t]] for t in ("low", "mid", "high")))
