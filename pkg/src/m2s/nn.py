"""Parameters, modules and the reusable conv blocks (FOCUS, Bottleneck, backbone)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.1


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is filled in by the owning module tree."""

    __slots__ = ("name", "decay", "state")

    def __init__(self, data, decay: bool = True):
        super().__init__(np.array(data, dtype=T.default_dtype()), requires_grad=True)
        self.name = ""
        self.decay = decay
        self.state: dict = {}
        self.grad = np.zeros_like(self.data)


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        """All parameters keyed by dotted path, in lexicographic order."""
        out: dict[str, Parameter] = {}
        for key, val in self._children():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out[path] = val
            else:
                out.update(val.named_parameters(path + "."))
        if prefix == "":
            for name, p in out.items():
                p.name = name
            return sorted(out.items())
        return list(out.items())

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = LEAKY_SLOPE) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky-relu":
        return T.leaky_relu(x, LEAKY_SLOPE)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 1, stride: int = 1,
                 pad=None, bias: bool = True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = stride
        self.pad = (kh // 2, kw // 2) if pad is None else pad
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw))
        self.bias = Parameter(np.zeros(c_out), decay=False) if bias else None

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def zero_(self) -> "Conv2d":
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


class Linear(Module):
    def __init__(self, rng, c_in: int, c_out: int, bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (c_in, c_out), c_in))
        self.bias = Parameter(np.zeros(c_out), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def zero_(self) -> "Linear":
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    activation: str = "leaky-relu"

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"channel counts must be positive: {self}")
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.activation not in ("sigmoid", "leaky-relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


class ConvAct(Module):
    def __init__(self, rng, cfg: BlockConfig):
        self.act = cfg.activation
        self.conv = Conv2d(rng, cfg.in_channels, cfg.out_channels, cfg.kernel, cfg.stride)

    def forward(self, x):
        return activate(self.conv(x), self.act)


class Focus(Module):
    """Space-to-depth by 2 then a 1x1 conv from ``4*c_in`` to ``out_channels``."""

    def __init__(self, rng, cfg: BlockConfig):
        self.act = cfg.activation
        self.conv = Conv2d(rng, 4 * cfg.in_channels, cfg.out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"focus block needs even extents, got {x.shape[2:]}")
        return activate(self.conv(T.pixel_unshuffle(x, 2)), self.act)


class Bottleneck(Module):
    """1x1 reduce to out/2, 3x3 expand to out, residual add when shapes allow."""

    def __init__(self, rng, cfg: BlockConfig, residual: bool = True):
        hidden = max(1, cfg.out_channels // 2)
        self.act = cfg.activation
        self.reduce = Conv2d(rng, cfg.in_channels, hidden, 1)
        self.expand = Conv2d(rng, hidden, cfg.out_channels, 3)
        self.residual = residual and cfg.in_channels == cfg.out_channels

    def forward(self, x: Tensor) -> Tensor:
        y = activate(self.expand(activate(self.reduce(x), self.act)), self.act)
        return x + y if self.residual else y


class FeaturePyramid(NamedTuple):
    c1: Tensor
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def level(self, i: int) -> Tensor:
        return self[i - 1]


class Backbone(Module):
    """Five stride-2 stages; the first is a FOCUS stem, the rest strided 3x3 convs.

    Each stage ends with one residual bottleneck, so ``C_k`` sits at stride ``2**k``.
    """

    def __init__(self, rng, channels=(16, 32, 64, 128, 256), in_channels: int = 3):
        if len(channels) != 5:
            raise ValueError(f"backbone needs five channel counts, got {channels}")
        self.channels = tuple(channels)
        self.stem = Focus(rng, BlockConfig(in_channels, channels[0]))
        self.downs = [ConvAct(rng, BlockConfig(channels[k - 1], channels[k], 3, 2)) for k in range(1, 5)]
        self.blocks = [Bottleneck(rng, BlockConfig(c, c)) for c in channels]

    def forward(self, image: Tensor) -> FeaturePyramid:
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"backbone input extents must be multiples of 32, got ({h},{w})")
        x = self.blocks[0](self.stem(image))
        feats = [x]
        for down, block in zip(self.downs, self.blocks[1:]):
            x = block(down(x))
            feats.append(x)
        return FeaturePyramid(*feats)


class Resample(Module):
    """Move a feature map from pyramid level ``src`` to level ``dst``.

    Upsampling is a 1x1 conv followed by bilinear resize (the two commute, so
    the conv runs at the cheaper resolution). Downsampling by ``2**k`` is
    pixel-unshuffle followed by a 1x1 conv. Same level and channel count is
    the identity.
    """

    def __init__(self, rng, c_in: int, c_out: int, src: int, dst: int):
        self.factor = 2 ** max(0, dst - src)
        if dst > src:
            self.conv = Conv2d(rng, c_in * self.factor ** 2, c_out, 1)
        else:
            self.conv = Conv2d(rng, c_in, c_out, 1) if c_in != c_out else None
        self.up = src > dst

    def forward(self, x: Tensor, dst_hw) -> Tensor:
        if self.factor > 1:
            return self.conv(T.pixel_unshuffle(x, self.factor))
        if self.conv is not None:
            x = self.conv(x)
        if self.up:
            x = T.bilinear_resize(x, *dst_hw)
        return x
