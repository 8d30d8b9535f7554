"""Training losses: the precision/recall/MAE loss and the binary cross-entropy baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, record

CE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 1.0
    alpha2: float = 0.5
    alpha3: float = 1.0
    eps: float = 1e-7
    kind: str = "designed"

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.kind not in ("designed", "cross_entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


def _check(s: Tensor, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeError(f"saliency {s.shape} and ground truth {g.shape} differ in shape")
    if s.data.ndim != 4:
        raise ShapeError(f"expected (n, 1, h, w) maps, got {s.shape}")
    if np.any(s.data < 0) or np.any(s.data > 1) or not np.all(np.isfinite(s.data)):
        raise ValueError("saliency values must lie in [0, 1]")
    if np.any((g != 0) & (g != 1)):
        raise ValueError("ground truth must be binary {0, 1}")
    return g


def designed_loss(s: Tensor, g: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha1*(1 - mean P) + alpha2*(1 - mean R) + alpha3*mean MAE over the batch.

    Per image, P = sum(s*g)/(sum(s)+eps) and R = sum(s*g)/(sum(g)+eps).
    """
    g = _check(s, g)
    m = s.shape[0]
    axes = (1, 2, 3)
    npx = s.data[0].size
    sg = (s.data * g).sum(axis=axes)
    ss = s.data.sum(axis=axes) + cfg.eps
    gg = g.sum(axis=axes) + cfg.eps
    prec = sg / ss
    rec = sg / gg
    diff = s.data - g
    mae = np.abs(diff).sum(axis=axes) / npx
    value = (cfg.alpha1 * (1 - prec.mean()) + cfg.alpha2 * (1 - rec.mean())
             + cfg.alpha3 * mae.mean())

    def _backward(grad):
        k = grad.reshape(-1)[0] / m
        b = (slice(None), None, None, None)
        dprec = (g - prec[b]) / ss[b]
        drec = g / gg[b]
        return (k * (-cfg.alpha1 * dprec - cfg.alpha2 * drec
                     + cfg.alpha3 * np.sign(diff) / npx),)

    return record(np.full((1, 1, 1, 1), value), (s,), _backward)


def cross_entropy(s: Tensor, g: np.ndarray, delta: float = CE_CLAMP) -> Tensor:
    """Mean binary cross-entropy of the foreground probability, s clamped to [delta, 1-delta]."""
    g = _check(s, g)
    sc = np.clip(s.data, delta, 1 - delta)
    n = s.data.size
    value = -(g * np.log(sc) + (1 - g) * np.log1p(-sc)).sum() / n
    inside = (s.data >= delta) & (s.data <= 1 - delta)

    def _backward(grad):
        k = grad.reshape(-1)[0] / n
        return (k * inside * (-g / sc + (1 - g) / (1 - sc)),)

    return record(np.full((1, 1, 1, 1), value), (s,), _backward)


def loss_fn(kind: str, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig(kind=kind)
    if kind == "designed":
        return lambda s, g: designed_loss(s, g, cfg)
    if kind == "cross_entropy":
        return cross_entropy
    raise ValueError(f"unknown loss kind {kind!r}")
