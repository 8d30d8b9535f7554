"""SGD-with-momentum training, plateau learning-rate schedule and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import SamplePair, augment, to_arrays
from .loss import LossConfig, loss_fn
from .model import CagnetConfig, Model, build
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MAGIC = b"CAGNETCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 8e-3
    momentum: float = 0.9
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    input_size: int = 64

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.input_size % 32:
            raise ValueError("input_size must be divisible by 32")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             velocities: Mapping[str, np.ndarray], lr: float, momentum: float) -> None:
    """In place: v <- momentum*v - lr*g; theta <- theta + v."""
    if set(params) != set(velocities) or not set(grads) <= set(params):
        bad = sorted((set(params) ^ set(velocities)) | (set(grads) - set(params)))
        raise KeyError(f"parameter/gradient/velocity keys disagree: {bad[0]!r}")
    for name, theta in params.items():
        v = velocities[name]
        v *= momentum
        g = grads.get(name)
        if g is not None:
            if g.shape != theta.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
            v -= lr * g
        theta += v


def plateau_schedule(history, lr0: float = 8e-3, patience: int = 10,
                     factor: float = 0.1) -> float:
    """Learning rate after the epochs in ``history``.

    The first epoch sets the best loss. Each epoch without a strict new
    minimum increments a counter; when it reaches ``patience`` the rate is
    multiplied by ``factor`` and the counter resets.
    """
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    best = np.inf
    wait = reductions = 0
    for loss in history:
        if loss < best:
            best, wait = loss, 0
        else:
            wait += 1
            if wait >= patience:
                reductions += 1
                wait = 0
    return lr0 * factor**reductions


# --------------------------------------------------------------------------- #
# checkpoints

@dataclass
class Checkpoint:
    config: CagnetConfig
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def to_bytes(self) -> bytes:
        arrays, entries = [], []
        for group, store in (("param", self.params), ("velocity", self.velocities),
                             ("buffer", self.buffers)):
            for name, arr in store.items():
                entries.append({"group": group, "name": name, "shape": list(arr.shape)})
                arrays.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        header = {
            "config": dataclasses.asdict(self.config),
            "train_config": dataclasses.asdict(self.train_config),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "history": self.history,
            "arrays": entries,
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(arrays)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(buf) < 20:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack("<IQ", buf[8:20])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(buf[20:20 + hlen])
        stores = {"param": {}, "velocity": {}, "buffer": {}}
        pos = 20 + hlen
        for e in header["arrays"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"truncated payload for {e['name']!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
            stores[e["group"]][e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
            pos += 8 * count
        return cls(
            config=CagnetConfig(**header["config"]),
            params=stores["param"],
            velocities=stores["velocity"],
            buffers=stores["buffer"],
            epoch=header["epoch"],
            rng_state=header["rng_state"],
            history=header["history"],
            train_config=TrainConfig(**header["train_config"]),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def snapshot(model: Model, velocities: Mapping[str, np.ndarray], **kw) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={n: p.data.copy() for n, p in model.named_parameters()},
        velocities={n: v.copy() for n, v in velocities.items()},
        buffers={n: b.copy() for n, b in model.named_buffers()},
        **kw,
    )


def restore(ckpt: Checkpoint) -> Model:
    """Build a model from a checkpoint's config and load its arrays."""
    model = build(ckpt.config)
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise CheckpointError(f"checkpoint parameters do not match the config: {missing[0]!r}")
    for name, p in params.items():
        p.data[...] = ckpt.params[name]
    for name, buf in model.named_buffers():
        if name in ckpt.buffers:
            buf[...] = ckpt.buffers[name]
    return model


# --------------------------------------------------------------------------- #
# training loop

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[str]
    maes: list[float]


def train(model: Model, dataset: list[SamplePair], cfg: TrainConfig,
          loss_cfg: LossConfig | None = None, out=None, log_path=None,
          on_epoch: Callable[[int, str], None] | None = None) -> TrainResult:
    """Train ``model`` in place; deterministic for a fixed ``cfg.seed``.

    When ``out`` is given the checkpoint is rewritten after every epoch, so a
    diverged run leaves the last finite state on disk.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    for pair in dataset:
        if pair.image.h % 32 or pair.image.w % 32:
            raise ValueError(f"sample size {(pair.image.h, pair.image.w)} not divisible by 32")
    loss_cfg = loss_cfg or LossConfig(kind=model.config.loss)
    criterion = loss_fn(loss_cfg.kind, loss_cfg)
    params = model.parameters()
    velocities = {n: np.zeros_like(p.data) for n, p in params.items()}
    shuffle_rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    lines: list[str] = []
    maes: list[float] = []

    def checkpoint(epoch):
        return snapshot(model, velocities, epoch=epoch,
                        rng_state=shuffle_rng.bit_generator.state,
                        history=list(history), train_config=cfg)

    ckpt = checkpoint(0)
    if out is not None:
        ckpt.save(out)
    model.train()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = plateau_schedule(history, cfg.lr0, cfg.plateau_patience,
                              cfg.plateau_factor) if history else cfg.lr0
        order = shuffle_rng.permutation(n)
        total_loss = total_mae = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [
                augment(dataset[i], np.random.default_rng([cfg.seed, epoch, int(i)]))
                if cfg.augment else dataset[i]
                for i in idx
            ]
            x, g = to_arrays(batch)
            with Tape() as tape:
                s = model(Tensor(x))
                if not np.all(np.isfinite(s.data)):
                    raise TrainingDiverged(f"non-finite prediction at epoch {epoch + 1}")
                loss = criterion(s, g)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}")
            grads = tape.backward(loss)
            sgd_step({k: p.data for k, p in params.items()},
                     {k: grads[p.var_id] for k, p in params.items() if p.var_id in grads},
                     velocities, lr, cfg.momentum)
            total_loss += value * len(idx)
            total_mae += np.abs(s.data - g).mean(axis=(1, 2, 3)).sum()
        mean_loss = total_loss / n
        mean_mae = total_mae / n
        if not all(np.all(np.isfinite(p.data)) for p in params.values()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}")
        history.append(mean_loss)
        maes.append(mean_mae)
        line = f"epoch {epoch + 1} loss {mean_loss:.10f} lr {lr:.6e} mae {mean_mae:.10f}"
        lines.append(line)
        log.info(line)
        ckpt = checkpoint(epoch + 1)
        if out is not None:
            ckpt.save(out)
        if on_epoch is not None:
            on_epoch(epoch + 1, line)
    if log_path is not None:
        Path(log_path).write_text("".join(line + "\n" for line in lines))
    return TrainResult(ckpt, lines, maes)
