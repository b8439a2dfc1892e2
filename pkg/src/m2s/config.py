"""Run configuration: dataclasses that round-trip through a JSON document."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cam import CamPlan
from .data import SceneSpec

ATTENTION_CHOICES = ("none", "se", "eca", "cbam")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    cam_channels: list[int] = field(default_factory=lambda: [64, 128, 256])
    cam_plan: dict = field(default_factory=lambda: CamPlan.v_shape().to_dict())
    use_cam: bool = True
    use_drm: bool = True
    drm_per_level: bool = False
    attention: str = "none"
    num_classes: int = 3
    head_width: int = 32
    beta_init: float = 0.3
    obj_prior: float | None = 0.01

    def validate(self) -> None:
        if len(self.backbone_channels) != 5 or min(self.backbone_channels) <= 0:
            raise ConfigError(f"backbone_channels must be five positive ints, got {self.backbone_channels}")
        if len(self.cam_channels) != 3 or min(self.cam_channels) <= 0:
            raise ConfigError(f"cam_channels must be three positive ints, got {self.cam_channels}")
        if self.attention not in ATTENTION_CHOICES:
            raise ConfigError(f"unknown attention kind {self.attention!r}; expected one of {ATTENTION_CHOICES}")
        if self.use_drm and self.attention != "none":
            raise ConfigError("use_drm and an attention baseline are mutually exclusive")
        if self.num_classes < 1 or self.head_width < 1:
            raise ConfigError("num_classes and head_width must be positive")
        if self.obj_prior is not None and not 0 < self.obj_prior < 1:
            raise ConfigError(f"obj_prior must lie in (0, 1), got {self.obj_prior}")
        if self.use_cam:
            try:
                CamPlan.from_dict(self.cam_plan).validate()
            except (KeyError, TypeError, ValueError) as err:
                raise ConfigError(f"invalid cam_plan: {err}") from err


@dataclass
class TrainConfig:
    phase1_lr: float = 3e-3
    phase1_epochs: int = 15
    warmup_epochs: float = 3.0
    grad_clip: float | None = 2.0
    phase2_lr: float = 3e-4
    phase2_epochs: int = 15
    momentum: float = 0.912
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    box_weight: float = 0.2
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    log_val_ap: bool = True

    def validate(self) -> None:
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class DataConfig:
    root: str = "data"
    scene: SceneSpec = field(default_factory=SceneSpec)
    train_count: int = 200
    val_count: int = 50

    def validate(self) -> None:
        try:
            self.scene.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.train_count < 0 or self.val_count < 0:
            raise ConfigError("split sizes must be >= 0")


@dataclass
class EvalConfig:
    conf_thresh: float = 0.25
    nms_thresh: float = 0.45
    max_det: int = 300


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        d = dict(d)
        sections = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        built = {}
        for key, kind in sections.items():
            sub = dict(d.get(key, {}))
            if kind is DataConfig and "scene" in sub:
                sub["scene"] = _build(SceneSpec, sub["scene"], "data.scene")
            built[key] = _build(kind, sub, key)
        return cls(**built, base_dir=Path(base_dir)).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
        return cls.from_dict(raw, base_dir=path.resolve().parent)

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def model_hash(self) -> str:
        canon = json.dumps(asdict(self.model), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _build(kind, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) and _is_tuple_field(kind, k) else v
              for k, v in values.items()}
    try:
        return kind(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def _is_tuple_field(kind, name) -> bool:
    default = next(f for f in dataclasses.fields(kind) if f.name == name).default
    return isinstance(default, tuple)


VARIANTS = {
    "base": dict(use_cam=False, use_drm=False, attention="none"),
    "cam": dict(use_cam=True, use_drm=False, attention="none"),
    "drm": dict(use_cam=False, use_drm=True, attention="none"),
    "cam+drm": dict(use_cam=True, use_drm=True, attention="none"),
    "cam+se": dict(use_cam=True, use_drm=False, attention="se"),
    "cam+eca": dict(use_cam=True, use_drm=False, attention="eca"),
    "cam+cbam": dict(use_cam=True, use_drm=False, attention="cbam"),
}


def with_variant(cfg: RunConfig, variant: str, seed: int | None = None) -> RunConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
    new = RunConfig.from_dict(cfg.to_dict(), cfg.base_dir)
    for k, v in VARIANTS[variant].items():
        setattr(new.model, k, v)
    if seed is not None:
        new.train.seed = seed
    return new.validate()
