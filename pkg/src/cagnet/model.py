"""CAGNet assembly: feature extraction, feature guidance and feature fusion."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass

from . import tensor as T
from .backbone import Backbone, BackboneSpec, toy_backbone, vgg16_shape
from .blocks import MFEM_VARIANTS, Conv2d, GcnBlock, GuideModule, Mfem, Module, Rrm
from .tensor import ShapeError, Tensor

GUIDE_MODES = ("both", "hg_only", "lg_only", "none")
WIRINGS = ("top_down", "independent_pairs")
LOSSES = ("designed", "cross_entropy")
NORMS = ("batch", "none")
BACKBONES = ("vgg16", "toy")


@dataclass
class CagnetConfig:
    backbone: str = "vgg16"
    toy_width: int = 16
    n_f: int = 8
    mfem_variant: str = "gcn"
    guide: str = "both"
    use_rrm: bool = True
    loss: str = "designed"
    norm: str = "batch"
    wiring: str = "top_down"
    se_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.backbone in BACKBONES, f"backbone must be one of {BACKBONES}"),
            (self.n_f >= 1, "n_f must be >= 1"),
            (self.mfem_variant in MFEM_VARIANTS, f"mfem_variant must be one of {MFEM_VARIANTS}"),
            (self.guide in GUIDE_MODES, f"guide must be one of {GUIDE_MODES}"),
            (self.loss in LOSSES, f"loss must be one of {LOSSES}"),
            (self.norm in NORMS, f"norm must be one of {NORMS}"),
            (self.wiring in WIRINGS, f"wiring must be one of {WIRINGS}"),
            (self.se_reduction >= 1, "se_reduction must be >= 1"),
            (self.backbone != "toy" or self.toy_width >= 4, "toy_width must be >= 4"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid config: {msg}")

    def backbone_spec(self) -> BackboneSpec:
        return vgg16_shape() if self.backbone == "vgg16" else toy_backbone(self.toy_width)

    def replace(self, **changes) -> "CagnetConfig":
        return dataclasses.replace(self, **changes)


def base_config(**overrides) -> CagnetConfig:
    """The ablation "Base" network: 1x1 convs instead of MFEM, no guides, no RRMs."""
    cfg = dict(mfem_variant="conv1x1", guide="none", use_rrm=False)
    cfg.update(overrides)
    return CagnetConfig(**cfg)


class Model(Module):
    def __init__(self, config: CagnetConfig):
        self.config = config
        spec = config.backbone_spec()
        self.backbone = Backbone(spec)
        self.mfems = [
            Mfem(cin, config.n_f, config.mfem_variant, config.norm) for cin in spec.level_channels
        ]
        c = 4 * config.n_f
        self.channels = c
        if config.guide != "none":
            hg = config.guide in ("both", "hg_only")
            lg = config.guide in ("both", "lg_only")
            self.guide_cd = GuideModule(c, config.se_reduction, hg, lg)
            self.guide_bc = GuideModule(c, config.se_reduction, hg, lg)
            self.guide_ab = GuideModule(c, config.se_reduction, hg, lg)
        if config.use_rrm:
            self.rrm_d = Rrm(c, config.norm)
            self.rrm_c = Rrm(c, config.norm)
            self.rrm_b = Rrm(c, config.norm)
            self.rrm_a = Rrm(c, config.norm)
        self.head = Conv2d(c, 2, 1)

    def guides(self) -> list[GuideModule]:
        return [getattr(self, n) for n in ("guide_cd", "guide_bc", "guide_ab") if hasattr(self, n)]

    def rrms(self) -> list[Rrm]:
        return [getattr(self, n) for n in ("rrm_d", "rrm_c", "rrm_b", "rrm_a") if hasattr(self, n)]

    def _pair(self, name: str, low: Tensor, high: Tensor) -> tuple[Tensor, Tensor]:
        guide = getattr(self, name, None)
        if guide is None:
            return low, T.upsample_bilinear(high, 2)
        return guide(low, high)

    def _refine(self, name: str, x: Tensor) -> Tensor:
        rrm = getattr(self, name, None)
        return x if rrm is None else rrm(x)

    def features(self, image: Tensor) -> Tensor:
        """Fused stride-4 features before the prediction head."""
        a, b, c, d = (m(x) for m, x in zip(self.mfems, self.backbone(image)))
        if self.config.wiring == "top_down":
            c_low, d_high = self._pair("guide_cd", c, d)
            b_low, c_high = self._pair("guide_bc", b, c_low)
            a_low, b_high = self._pair("guide_ab", a, b_low)
            grid_c, grid_b = d_high, c_high
        else:
            c_low, d_high = self._pair("guide_cd", c, d)
            b_low, c_high = self._pair("guide_bc", b, c)
            a_low, b_high = self._pair("guide_ab", a, b)
            grid_c, grid_b = T.add(d_high, c_low), T.add(c_high, b_low)

        x = self._refine("rrm_d", grid_c)
        x = self._refine("rrm_c", T.add(T.upsample_bilinear(x, 2), grid_b))
        x = self._refine("rrm_b", T.add(T.upsample_bilinear(x, 2), b_high))
        return self._refine("rrm_a", T.add(x, a_low))

    def __call__(self, image: Tensor) -> Tensor:
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"model expects (n, 3, H, W), got {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ShapeError(f"input size {image.shape[2:]} must be divisible by 32")
        probs = T.softmax_channels(self.head(self.features(image)))
        return T.upsample_bilinear(T.slice_channels(probs, 1, 2), 4)

    forward = __call__


def build(config: CagnetConfig) -> Model:
    model = Model(config)
    model.init_parameters(config.seed)
    return model


# --------------------------------------------------------------------------- #
# parameter accounting

COMPONENTS = ("backbone", "mfem", "guide", "rrm", "head")
KINDS = ("weights", "biases", "norm")


@dataclass
class ParamCount:
    breakdown: dict[str, Counter]

    def total(self, kind: str | None = None) -> int:
        if kind is None:
            return sum(sum(c.values()) for c in self.breakdown.values())
        return sum(c[kind] for c in self.breakdown.values())

    def component(self, name: str) -> int:
        return sum(self.breakdown[name].values())

    def rows(self) -> list[tuple[str, int, int, int, int]]:
        return [
            (name, c["weights"], c["biases"], c["norm"], sum(c.values()))
            for name, c in self.breakdown.items()
        ]


def _component_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head == "mfems":
        return "mfem"
    for comp in ("guide", "rrm"):
        if head.startswith(comp):
            return comp
    return head


def _kind_of(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    return {"weight": "weights", "bias": "biases"}.get(leaf, "norm")


def count_params(model: Model) -> ParamCount:
    """Exact parameter counts per component, from the live parameter store."""
    breakdown = {comp: Counter({k: 0 for k in KINDS}) for comp in COMPONENTS}
    for name, p in model.named_parameters():
        breakdown[_component_of(name)][_kind_of(name)] += p.data.size
    return ParamCount(breakdown)


def closed_form_params(config: CagnetConfig) -> ParamCount:
    """Parameter counts derived from the config alone, without building a model."""
    spec = config.backbone_spec()
    n, c = config.n_f, 4 * config.n_f
    bd = {comp: Counter({k: 0 for k in KINDS}) for comp in COMPONENTS}
    bd["backbone"]["weights"] = spec.weight_count()
    bd["backbone"]["biases"] = spec.bias_count()

    for cin in spec.level_channels:
        v = config.mfem_variant
        if v == "conv1x1":
            w, b, norm_ch = cin * c, c, c
        elif v == "gcn":
            w = 9 * cin * n + sum(GcnBlock.weight_count(k, cin, n) for k in (7, 11, 15))
            b, norm_ch = n + 3 * 4 * n, c
        elif v == "dilated":
            w, b, norm_ch = 4 * 9 * cin * n, 4 * n, c
        else:
            w, b, norm_ch = sum(k * k for k in (3, 7, 11, 15)) * cin * n, 4 * n, c
        bd["mfem"]["weights"] += w
        bd["mfem"]["biases"] += b
        bd["mfem"]["norm"] += 2 * norm_ch

    if config.guide != "none":
        hidden = max(1, c // config.se_reduction)
        per_w = per_b = 0
        if config.guide in ("both", "hg_only"):
            per_w += 2 * c
            per_b += 1
        if config.guide in ("both", "lg_only"):
            per_w += 2 * c * hidden + hidden * c
            per_b += hidden + c
        bd["guide"]["weights"] = 3 * per_w
        bd["guide"]["biases"] = 3 * per_b

    if config.use_rrm:
        bd["rrm"]["weights"] = 4 * (2 * 9 * c * c + c)
        bd["rrm"]["biases"] = 4 * (2 * c + 1)
        bd["rrm"]["norm"] = 4 * 2 * 2 * c

    bd["head"]["weights"] = 2 * c
    bd["head"]["biases"] = 2
    return ParamCount(bd)
