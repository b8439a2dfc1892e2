"""The desk-scale detector: backbone -> (CAM) -> (DRM | attention baseline) -> three heads."""

from __future__ import annotations

import numpy as np

from .cam import CAM, CamPlan, TriFeatures
from .config import ModelConfig
from .detect import DetectionHead, HeadOutput
from .drm import DRM, attention_baseline
from .nn import Backbone, Module
from .tensor import Tensor


class M2SDetector(Module):
    """Configurable detector covering every ablation variant.

    Without CAM the backbone's C2/C3/C4 stand in for Low/Mid/High. The
    refinement stage (DRM or a single-input attention baseline) rewrites Low,
    which feeds the extra stride-4 head; Mid and High feed the stride-8 and
    stride-16 heads unchanged unless ``drm_per_level`` is set.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(rng, cfg.backbone_channels)
        if cfg.use_cam:
            self.cam = CAM(rng, cfg.backbone_channels, cfg.cam_channels, CamPlan.from_dict(cfg.cam_plan))
            tri_channels = self.cam.out_channels
        else:
            self.cam = None
            tri_channels = tuple(cfg.backbone_channels[1:4])
        self.tri_channels = tri_channels
        self.refine = {}
        if cfg.use_drm:
            levels = ("low", "mid", "high") if cfg.drm_per_level else ("low",)
            for name in levels:
                k = ("low", "mid", "high").index(name)
                self.refine[name] = DRM(rng, tri_channels[k], k + 2, tri_channels, beta=cfg.beta_init)
        elif cfg.attention != "none":
            self.refine["low"] = attention_baseline(rng, cfg.attention, tri_channels[0])
        self.head = DetectionHead(rng, tri_channels, cfg.num_classes, cfg.head_width, cfg.obj_prior)

    def features(self, image: Tensor) -> TriFeatures:
        pyr = self.backbone(image)
        if self.cam is not None:
            return self.cam(pyr)
        return TriFeatures(pyr.c2, pyr.c3, pyr.c4)

    def neck(self, tri: TriFeatures) -> tuple[Tensor, Tensor, Tensor]:
        out = list(tri)
        for k, name in enumerate(("low", "mid", "high")):
            block = self.refine.get(name)
            if block is None:
                continue
            out[k] = block(tri[k], tri) if isinstance(block, DRM) else block(tri[k])
        return tuple(out)

    def forward(self, image: Tensor) -> HeadOutput:
        return self.head(*self.neck(self.features(image)))

    def betas(self) -> dict[str, float]:
        return {name: float(b.srm.beta.data) for name, b in self.refine.items() if isinstance(b, DRM)}
