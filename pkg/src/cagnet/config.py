"""Flat ``key=value`` run configuration covering model, training and loss settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .loss import LossConfig
from .model import CagnetConfig
from .trainer import TrainConfig

ALIASES = {"mfem": "mfem_variant", "lr": "lr0"}


@dataclass
class RunConfig:
    model: CagnetConfig = field(default_factory=CagnetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(self.model.replace(seed=seed),
                         dataclasses.replace(self.train, seed=seed), self.loss)

    def with_epochs(self, epochs: int) -> "RunConfig":
        return RunConfig(self.model, dataclasses.replace(self.train, epochs=epochs), self.loss)


def _fields(cls) -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _convert(key: str, raw: str, kind) -> object:
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored.

    ``seed`` sets both the model initialization and training seeds and
    ``loss`` selects both the model's loss and the loss kind. Unknown keys
    are an error.
    """
    model_f, train_f = _fields(CagnetConfig), _fields(TrainConfig)
    loss_f = {k: v for k, v in _fields(LossConfig).items() if k != "kind"}
    model_kw, train_kw, loss_kw = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key)
        matched = False
        for known, store in ((model_f, model_kw), (train_f, train_kw), (loss_f, loss_kw)):
            if key in known:
                store[key] = _convert(key, raw, known[key])
                matched = True
        if not matched:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    model = CagnetConfig(**model_kw)
    return RunConfig(model, TrainConfig(**train_kw), LossConfig(kind=model.loss, **loss_kw))


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
