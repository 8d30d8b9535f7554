"""Architectural building blocks: GCN, MFEM, Guide Module, RRM, normalization."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MFEM_KERNELS = (3, 7, 11, 15)
MFEM_DILATIONS = (1, 3, 5, 7)
MFEM_VARIANTS = ("gcn", "dilated", "trivial", "conv1x1")


class Module:
    """Parameter container. Parameters are ``Tensor`` attributes with a var id;
    child modules are ``Module`` attributes (or lists of them)."""

    training = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def init_parameters(self, seed: int) -> None:
        """Seed every parameter from ``(seed, name)``.

        Conv weights get fan-in scaled uniform values, biases and shifts zero,
        scales one. Because each draw depends only on the name, models built
        from different configs share identical values for shared parameters.
        """
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "weight":
                fan_in = int(np.prod(p.shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                p.data[...] = rng.uniform(-bound, bound, size=p.shape)
            elif leaf == "gamma":
                p.data[...] = 1.0
            else:
                p.data[...] = 0.0


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int | tuple[int, int],
                 stride: int = 1, pad: int | tuple[int, int] | None = None,
                 dilation: int = 1, bias: bool = True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if pad is None:
            pad = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
        elif isinstance(pad, int):
            pad = (pad, pad)
        self.cin, self.cout = cin, cout
        self.stride, self.pad, self.dilation = stride, tuple(pad), dilation
        self.weight = Tensor(np.zeros((cout, cin, kh, kw)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class NormLayer(Module):
    """Per-channel normalization.

    ``mode="batch"`` normalizes with batch statistics while training and with
    running averages at inference; ``mode="none"`` is a plain per-channel
    affine map.
    """

    def __init__(self, channels: int, mode: str = "batch", eps: float = 1e-5,
                 momentum: float = 0.9):
        if mode not in ("batch", "none"):
            raise ValueError(f"unknown norm mode {mode!r}")
        self.mode, self.eps, self.momentum = mode, eps, momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        if mode == "batch":
            self.running_mean = np.zeros(channels)
            self.running_var = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "none":
            return T.affine_channels(x, self.gamma, self.beta)
        if self.training:
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            m = x.data.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            self.running_mean *= self.momentum
            self.running_mean += (1 - self.momentum) * mu
            self.running_var *= self.momentum
            self.running_var += (1 - self.momentum) * unbiased
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        shift = Tensor(-self.running_mean * inv)
        x = T.affine_channels(x, Tensor(inv), shift)
        return T.affine_channels(x, self.gamma, self.beta)


class GcnBlock(Module):
    """Factorized k x k convolution: (k x 1 -> 1 x k) + (1 x k -> k x 1)."""

    def __init__(self, cin: int, cout: int, k: int):
        if k % 2 == 0:
            raise ValueError(f"GCN kernel extent must be odd, got {k}")
        p = (k - 1) // 2
        self.k, self.cin, self.cout = k, cin, cout
        self.a1 = Conv2d(cin, cout, (k, 1), pad=(p, 0))
        self.a2 = Conv2d(cout, cout, (1, k), pad=(0, p))
        self.b1 = Conv2d(cin, cout, (1, k), pad=(0, p))
        self.b2 = Conv2d(cout, cout, (k, 1), pad=(p, 0))

    @staticmethod
    def weight_count(k: int, cin: int, cout: int) -> int:
        return 2 * (k * cin * cout + k * cout * cout)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(f"GCN expects {self.cin} channels, got {x.shape[1]}")
        return T.add(self.a2(self.a1(x)), self.b2(self.b1(x)))


class Mfem(Module):
    """Multi-scale feature extraction: four parallel branches, each emitting
    ``width`` channels, normalized, rectified and concatenated.

    Variants: ``gcn`` (3x3 conv + GCN k=7,11,15), ``dilated`` (3x3 convs at
    dilation 1,3,5,7), ``trivial`` (dense 3,7,11,15 kernels) and ``conv1x1``
    (a single 1x1 conv to 4*width channels).
    """

    def __init__(self, cin: int, width: int, variant: str = "gcn", norm: str = "batch"):
        if variant not in MFEM_VARIANTS:
            raise ValueError(f"unknown MFEM variant {variant!r}")
        if width < 1:
            raise ValueError(f"MFEM width must be >= 1, got {width}")
        self.cin, self.width, self.variant = cin, width, variant
        if variant == "conv1x1":
            self.branches = [Conv2d(cin, 4 * width, 1)]
            self.norms = [NormLayer(4 * width, norm)]
            return
        if variant == "gcn":
            self.branches = [Conv2d(cin, width, 3)] + [
                GcnBlock(cin, width, k) for k in MFEM_KERNELS[1:]
            ]
        elif variant == "dilated":
            self.branches = [Conv2d(cin, width, 3, dilation=d) for d in MFEM_DILATIONS]
        else:
            self.branches = [Conv2d(cin, width, k) for k in MFEM_KERNELS]
        self.norms = [NormLayer(width, norm) for _ in self.branches]

    @property
    def out_channels(self) -> int:
        return 4 * self.width

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(f"MFEM expects {self.cin} channels, got {x.shape[1]}")
        outs = [T.relu(norm(branch(x))) for branch, norm in zip(self.branches, self.norms)]
        return T.concat_channels(outs)


class GuideModule(Module):
    """Pairwise guidance between a low-level map and the next-coarser map.

    The high-level input is upsampled x2 onto the low-level grid and
    concatenated with the low-level input. A 1x1 conv + sigmoid yields
    spatial weights for the high-level features (``use_hg``); a squeeze-and-
    excitation branch yields channel weights for the low-level features
    (``use_lg``). A disabled branch acts as all-ones weights.
    """

    def __init__(self, channels: int, reduction: int = 4, use_hg: bool = True,
                 use_lg: bool = True):
        self.channels = channels
        self.use_hg, self.use_lg = use_hg, use_lg
        if use_hg:
            self.spatial = Conv2d(2 * channels, 1, 1)
        if use_lg:
            hidden = max(1, channels // reduction)
            self.squeeze = Conv2d(2 * channels, hidden, 1)
            self.excite = Conv2d(hidden, channels, 1)

    def weights(self, low: Tensor, high: Tensor) -> tuple[Tensor | None, Tensor | None, Tensor]:
        """Spatial weights, channel weights and the upsampled high-level map."""
        c = self.channels
        if low.shape[1] != c or high.shape[1] != c:
            raise ShapeError(f"guide expects {c} channels, got {low.shape[1]} and {high.shape[1]}")
        if low.shape[0] != high.shape[0] or (low.shape[2], low.shape[3]) != (
            2 * high.shape[2], 2 * high.shape[3]
        ):
            raise ShapeError(f"high-level map {high.shape} is not half of low-level {low.shape}")
        up = T.upsample_bilinear(high, 2)
        if not (self.use_hg or self.use_lg):
            return None, None, up
        f = T.concat_channels([low, up])
        s = T.sigmoid(self.spatial(f)) if self.use_hg else None
        ch = None
        if self.use_lg:
            ch = T.sigmoid(self.excite(T.relu(self.squeeze(T.global_avg_pool(f)))))
        return s, ch, up

    def __call__(self, low: Tensor, high: Tensor) -> tuple[Tensor, Tensor]:
        s, ch, up = self.weights(low, high)
        guided_high = T.mul_broadcast(up, s) if s is not None else up
        guided_low = T.mul_broadcast(low, ch) if ch is not None else low
        return guided_low, guided_high


class Rrm(Module):
    """Residual refinement: y = x + sigmoid(conv1x1(x)) * F(x), where F is
    two pre-activation (norm, relu, 3x3 conv) stages."""

    def __init__(self, channels: int, norm: str = "batch"):
        self.channels = channels
        self.norm1 = NormLayer(channels, norm)
        self.conv1 = Conv2d(channels, channels, 3)
        self.norm2 = NormLayer(channels, norm)
        self.conv2 = Conv2d(channels, channels, 3)
        self.attention = Conv2d(channels, 1, 1)

    def residual(self, x: Tensor) -> Tensor:
        h = self.conv1(T.relu(self.norm1(x)))
        return self.conv2(T.relu(self.norm2(h)))

    def attention_map(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.attention(x))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"RRM expects {self.channels} channels, got {x.shape[1]}")
        return T.add(x, T.mul_broadcast(self.residual(x), self.attention_map(x)))
