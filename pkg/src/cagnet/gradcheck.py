"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tape, Tensor


class GradCheckError(RuntimeError):
    """A function value or gradient was non-finite during a check."""


def _as_named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
               h: float = 1e-5, max_samples: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The error of one parameter array is ``|a - n| / max(1e-12, |a| + |n|)``
    with Euclidean norms over its checked entries; the result is the max over
    arrays. ``max_samples`` limits how many entries per array are perturbed.
    """
    return max(grad_check_detail(f, params, h, max_samples, rng).values(), default=0.0)


def grad_check_detail(f: Callable[[], Tensor],
                      params: Mapping[str, Tensor] | Sequence[Tensor],
                      h: float = 1e-5, max_samples: int | None = None,
                      rng: np.random.Generator | None = None) -> dict[str, float]:
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    named = _as_named(params)
    for name, p in named:
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} does not require grad")
    rng = rng or np.random.default_rng(0)

    with Tape() as tape:
        loss = f()
    base = loss.item()
    if not np.isfinite(base):
        raise GradCheckError(f"non-finite function value {base}")
    grads = tape.backward(loss)

    errors: dict[str, float] = {}
    for name, p in named:
        analytic = grads.get(p.var_id, np.zeros_like(p.data)).reshape(-1)
        if not np.all(np.isfinite(analytic)):
            raise GradCheckError(f"non-finite analytic gradient for {name!r}")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_samples is not None and flat.size > max_samples:
            idx = np.sort(rng.choice(flat.size, size=max_samples, replace=False))
        numeric = np.empty(idx.size)
        for j, k in enumerate(idx):
            old = flat[k]
            flat[k] = old + h
            fp = f().item()
            flat[k] = old - h
            fm = f().item()
            flat[k] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite function value while perturbing {name!r}[{k}]")
            numeric[j] = (fp - fm) / (2 * h)
        a = analytic[idx]
        num = np.linalg.norm(a - numeric)
        den = max(1e-12, np.linalg.norm(a) + np.linalg.norm(numeric))
        errors[name] = float(num / den)
    return errors
