"""Feature-level backbones producing maps at strides 4, 8, 16 and 32."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .blocks import Conv2d, Module
from .tensor import ShapeError, Tensor

# Level channel counts (A, B, C, D) per backbone. Only "vgg16" and "toy" are
# buildable; the others document the published tap geometry.
LEVEL_CHANNELS = {
    "vgg16": (256, 512, 512, 1024),
    "resnet50": (256, 512, 1024, 2048),
    "nasnet_mobile": (44, 264, 528, 1056),
    "nasnet_large": (168, 1008, 2016, 4032),
}


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    kernel: int = 3
    stride: int = 1
    pad: int | None = None  # None: same-size padding for stride 1

    @property
    def weight_count(self) -> int:
        return self.kernel * self.kernel * self.cin * self.cout


POOL = "pool"


@dataclass(frozen=True)
class BackboneSpec:
    """Ordered layer plan. ``taps`` are indices into ``layers`` whose outputs
    (after relu) become levels A-D."""

    name: str
    layers: tuple[ConvSpec | str, ...]
    taps: tuple[int, int, int, int]
    level_channels: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))

    @property
    def convs(self) -> list[ConvSpec]:
        return [layer for layer in self.layers if isinstance(layer, ConvSpec)]

    def weight_count(self, exclude: tuple[str, ...] = ()) -> int:
        return sum(c.weight_count for c in self.convs if c.name not in exclude)

    def bias_count(self) -> int:
        return sum(c.cout for c in self.convs)


def vgg16_shape() -> BackboneSpec:
    """Conv-only VGG-16 with an added 3x3x1024 conv after the last pool.

    Levels tap conv3_3, conv4_3, conv5_3 and the added layer.
    """
    plan: list[ConvSpec | str] = []
    cin = 3
    stages = [(1, [64, 64]), (2, [128, 128]), (3, [256] * 3), (4, [512] * 3), (5, [512] * 3)]
    taps = []
    for stage, widths in stages:
        for i, cout in enumerate(widths, start=1):
            plan.append(ConvSpec(f"conv{stage}_{i}", cin, cout))
            cin = cout
        if stage >= 3:
            taps.append(len(plan) - 1)
        plan.append(POOL)
    plan.append(ConvSpec("added", 512, 1024))
    taps.append(len(plan) - 1)
    return BackboneSpec("vgg16", tuple(plan), tuple(taps), LEVEL_CHANNELS["vgg16"])


def toy_backbone(width: int) -> BackboneSpec:
    """Desk-scale backbone: a 4x4 stride-4 patch stem followed by four stages
    of two 3x3 convs, stages 2-4 each opened by a 2x2 max pool."""
    if width < 4:
        raise ValueError(f"toy backbone width must be >= 4, got {width}")
    plan: list[ConvSpec | str] = [ConvSpec("stem", 3, width, kernel=4, stride=4, pad=0)]
    cin = width
    taps = []
    for stage in range(1, 5):
        cout = width * 2 ** (stage - 1)
        if stage > 1:
            plan.append(POOL)
        plan.append(ConvSpec(f"s{stage}_1", cin, cout))
        plan.append(ConvSpec(f"s{stage}_2", cout, cout))
        taps.append(len(plan) - 1)
        cin = cout
    chans = tuple(width * 2 ** i for i in range(4))
    return BackboneSpec(f"toy{width}", tuple(plan), tuple(taps), chans)


class Backbone(Module):
    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        self.convs = [
            Conv2d(c.cin, c.cout, c.kernel, stride=c.stride, pad=c.pad) for c in spec.convs
        ]

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"backbone expects (n, 3, H, W), got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {(h, w)} must be divisible by 32")
        levels = []
        x = image
        convs = iter(self.convs)
        for i, layer in enumerate(self.spec.layers):
            x = T.maxpool2(x) if layer == POOL else T.relu(next(convs)(x))
            if i in self.spec.taps:
                levels.append(x)
        return levels


def backbone_forward(spec: BackboneSpec, image: Tensor, seed: int = 0) -> list[Tensor]:
    """Run a freshly initialized backbone of ``spec`` on ``image``."""
    net = Backbone(spec)
    net.init_parameters(seed)
    return net(image)
