"""Named finite-difference checks for every primitive, block, loss and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import re

import numpy as np

from . import tensor as T
from .blocks import GcnBlock, GuideModule, Mfem, NormLayer, Rrm
from .gradcheck import grad_check
from .loss import cross_entropy, designed_loss
from .model import CagnetConfig, build
from .tensor import Tensor

BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class Check:
    name: str
    group: str
    run: Callable[[], float]
    tol: float = BLOCK_TOL


# Biases feeding straight into a batch-norm layer: the normalization removes
# any per-channel constant, so their true gradient is exactly zero and a
# relative-error comparison is meaningless (both sides are rounding noise).
_PRE_NORM_BIAS = re.compile(r"(^|\.)(branches\.\d+\.((a2|b2)\.)?|rrm_[a-d]\.conv1\.|^conv1\.)bias$")


def pre_norm_biases(names) -> set[str]:
    return {n for n in names if _PRE_NORM_BIAS.search(n)}


def _checked(params: dict, norm: str) -> dict:
    if norm != "batch":
        return params
    skip = pre_norm_biases(params)
    return {k: v for k, v in params.items() if k not in skip}


def _rand(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def _op_check(build_fn: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list]]):
    def run():
        rng = np.random.default_rng(1234)
        out_fn, params = build_fn(rng)
        # random projection so every output element contributes to the scalar
        proj = Tensor(np.random.default_rng(99).normal(size=out_fn().shape))
        return grad_check(lambda: T.sum_all(T.mul(out_fn(), proj)), params)
    return run


def _module_check(make, in_shapes, seed=7, max_samples=6, call=None, norm="none"):
    def run():
        rng = np.random.default_rng(seed)
        module = make()
        module.init_parameters(seed)
        # perturb zero-initialized biases/shifts so their gradients are exercised
        for _, p in module.named_parameters():
            p.data += 0.1 * rng.normal(size=p.shape)
        inputs = [_rand(rng, *s) for s in in_shapes]
        fn = call or (lambda m, *xs: m(*xs))
        outs = fn(module, *inputs)
        outs = outs if isinstance(outs, tuple) else (outs,)
        projs = [Tensor(rng.normal(size=o.shape)) for o in outs]

        def f():
            res = fn(module, *inputs)
            res = res if isinstance(res, tuple) else (res,)
            total = None
            for o, pr in zip(res, projs):
                term = T.sum_all(T.mul(o, pr))
                total = term if total is None else T.add(total, term)
            return total

        params = _checked(dict(module.named_parameters()), norm)
        params.update({f"input{i}": x for i, x in enumerate(inputs)})
        return grad_check(f, params, max_samples=max_samples, rng=np.random.default_rng(seed))
    return run


def _loss_check(kind):
    def run():
        rng = np.random.default_rng(5)
        s = Tensor(rng.uniform(0.05, 0.95, size=(3, 1, 6, 6)), requires_grad=True)
        g = (rng.random((3, 1, 6, 6)) < 0.4).astype(float)
        fn = designed_loss if kind == "designed" else cross_entropy
        return grad_check(lambda: fn(s, g), [s])
    return run


def _model_check(norm: str):
    def run():
        cfg = CagnetConfig(backbone="toy", toy_width=4, n_f=2, norm=norm, seed=3)
        model = build(cfg)
        rng = np.random.default_rng(11)
        for _, p in model.named_parameters():
            p.data += 0.05 * rng.normal(size=p.shape)
        x = Tensor(rng.normal(size=(2, 3, 64, 64)))
        g = (rng.random((2, 1, 64, 64)) < 0.3).astype(float)
        return grad_check(lambda: designed_loss(model(x), g), _checked(model.parameters(), norm),
                          max_samples=3, rng=np.random.default_rng(0))
    return run


def _primitive_checks() -> list[Check]:
    def conv(rng):
        x, w, b = _rand(rng, 2, 3, 8, 8), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
        return (lambda: T.conv2d(x, w, b, pad=(1, 1))), [x, w, b]

    def conv_rect_strided(rng):
        x, w, b = _rand(rng, 2, 3, 9, 8), _rand(rng, 2, 3, 3, 4), _rand(rng, 2)
        return (lambda: T.conv2d(x, w, b, stride=2, pad=(1, 1))), [x, w, b]

    def dilated(rng):
        x, w, b = _rand(rng, 1, 2, 9, 9), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
        return (lambda: T.dilated_conv2d(x, w, b, 3, (3, 3))), [x, w, b]

    def upsample(rng):
        x = _rand(rng, 2, 2, 3, 4)
        return (lambda: T.upsample_bilinear(x, 2)), [x]

    def maxpool(rng):
        x = _rand(rng, 2, 2, 6, 4)
        return (lambda: T.maxpool2(x)), [x]

    def gap(rng):
        x = _rand(rng, 2, 3, 4, 5)
        return (lambda: T.global_avg_pool(x)), [x]

    def concat(rng):
        a, b = _rand(rng, 2, 2, 3, 3), _rand(rng, 2, 3, 3, 3)
        return (lambda: T.concat_channels([a, b])), [a, b]

    def add(rng):
        a, b = _rand(rng, 2, 2, 3, 3), _rand(rng, 2, 2, 3, 3)
        return (lambda: T.add(a, b)), [a, b]

    def mul_ch(rng):
        x, w = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 1, 1)
        return (lambda: T.mul_broadcast(x, w)), [x, w]

    def mul_sp(rng):
        x, w = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 1, 4, 4)
        return (lambda: T.mul_broadcast(x, w)), [x, w]

    def relu(rng):
        x = _rand(rng, 2, 3, 4, 4)
        return (lambda: T.relu(x)), [x]

    def sigmoid(rng):
        x = _rand(rng, 2, 3, 4, 4)
        return (lambda: T.sigmoid(x)), [x]

    def softmax(rng):
        x = _rand(rng, 2, 3, 4, 4)
        return (lambda: T.softmax_channels(x)), [x]

    def bn(rng):
        x, ga, be = _rand(rng, 3, 2, 4, 4), _rand(rng, 2), _rand(rng, 2)
        return (lambda: T.batch_norm(x, ga, be)[0]), [x, ga, be]

    def affine(rng):
        x, ga, be = _rand(rng, 2, 2, 4, 4), _rand(rng, 2), _rand(rng, 2)
        return (lambda: T.affine_channels(x, ga, be)), [x, ga, be]

    def slice_(rng):
        x = _rand(rng, 2, 4, 3, 3)
        return (lambda: T.slice_channels(x, 1, 3)), [x]

    ops = {
        "conv2d": conv, "conv2d_rect_strided": conv_rect_strided, "dilated_conv2d": dilated,
        "upsample_bilinear": upsample, "maxpool2": maxpool, "global_avg_pool": gap,
        "concat_channels": concat, "slice_channels": slice_, "add": add,
        "mul_broadcast_channel": mul_ch, "mul_broadcast_spatial": mul_sp, "relu": relu,
        "sigmoid": sigmoid, "softmax_channels": softmax, "batch_norm": bn,
        "affine_channels": affine,
    }
    return [Check(name, "primitives", _op_check(fn)) for name, fn in ops.items()]


def _block_checks() -> list[Check]:
    checks = [
        Check("gcn_k7", "blocks", _module_check(lambda: GcnBlock(3, 2, 7), [(2, 3, 9, 9)])),
        Check("norm_batch", "blocks", _module_check(lambda: NormLayer(3, "batch"), [(2, 3, 4, 4)])),
        Check("norm_none", "blocks", _module_check(lambda: NormLayer(3, "none"), [(2, 3, 4, 4)])),
    ]
    for norm in ("none", "batch"):
        for variant in ("gcn", "dilated", "trivial", "conv1x1"):
            checks.append(Check(f"mfem_{variant}_{norm}norm", "blocks", _module_check(
                lambda v=variant, nm=norm: Mfem(3, 2, v, nm), [(2, 3, 16, 16)],
                max_samples=4, norm=norm)))
    for name, hg, lg in (("guide", True, True), ("guide_hg_only", True, False),
                         ("guide_lg_only", False, True)):
        checks.append(Check(name, "blocks", _module_check(
            lambda hg=hg, lg=lg: GuideModule(8, 4, hg, lg), [(2, 8, 6, 6), (2, 8, 3, 3)])))
    for norm in ("none", "batch"):
        checks.append(Check(f"rrm_{norm}norm", "blocks", _module_check(
            lambda nm=norm: Rrm(4, nm), [(2, 4, 6, 6)], norm=norm)))
    return checks


def all_checks() -> list[Check]:
    return (
        _primitive_checks()
        + _block_checks()
        + [Check("designed_loss", "losses", _loss_check("designed")),
           Check("cross_entropy", "losses", _loss_check("cross_entropy"))]
        + [Check("model_toy_batchnorm", "model", _model_check("batch"), MODEL_TOL),
           Check("model_toy_nonorm", "model", _model_check("none"), MODEL_TOL)]
    )


def select(name: str | None = None) -> list[Check]:
    checks = all_checks()
    if name is None:
        return checks
    picked = [c for c in checks if name in (c.name, c.group)]
    if not picked:
        raise ValueError(f"unknown gradcheck module {name!r}")
    return picked


def run_checks(checks: list[Check]) -> list[tuple[Check, float, bool]]:
    results = []
    for c in checks:
        err = c.run()
        results.append((c, err, err < c.tol))
    return results
