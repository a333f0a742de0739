"""Denoising training with scheduled sampling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .model import ConfigError, CrrnModel, FeedPolicy, scheduled_sample  # noqa: F401
from .optim import Adam
from .synth import SpiSequence
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.1
    decay_frac: float = 0.8
    sigma_dn: float = 0.1
    p_zero: float = 0.05
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs must be a positive integer")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if not 0.0 < self.decay_frac <= 1.0:
            raise ConfigError("decay_frac must be in (0, 1]")
        if not 0.0 <= self.p_zero <= 1.0:
            raise ConfigError("p_zero must be in [0, 1]")
        if self.sigma_dn < 0 or self.lr <= 0:
            raise ConfigError("sigma_dn must be >= 0 and lr > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def epsilon_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear from eps_start to eps_end over the first ``decay_frac`` of training, then flat."""
    span = cfg.decay_frac * cfg.epochs
    if epoch >= span:
        return cfg.eps_end
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * epoch / span


def corrupt_input(X: np.ndarray, sigma_dn: float, p_zero: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise plus random zeroing on the volume channel (axis -3 index 0)."""
    out = np.array(X, copy=True)
    vol = out[..., 0, :, :]
    if sigma_dn > 0:
        vol = vol + rng.normal(0.0, sigma_dn, vol.shape).astype(out.dtype)
    if p_zero > 0:
        vol = vol * (rng.random(vol.shape) >= p_zero)
    out[..., 0, :, :] = vol
    return out


def masked_mse(outputs: Sequence[Tensor], target: np.ndarray) -> Tensor:
    """Mean squared volume error over pad pixels.

    ``outputs`` are T tensors ``(n, 2, h, w)``; ``target`` is ``(n, T, 2, h, w)``
    with the pad mask in channel 1.
    """
    n, T_len = target.shape[:2]
    pred = T.slice_channels(T.concat(outputs, axis=0), 0, 1)
    tgt = np.concatenate([target[:, t, 0:1] for t in range(T_len)], axis=0)
    mask = np.concatenate([target[:, t, 1:2] for t in range(T_len)], axis=0)
    count = max(float(mask.sum()), 1.0)
    weight = Tensor((mask / count).astype(pred.dtype))
    return T.sum_all(T.mul(T.square(T.sub(pred, Tensor(tgt.astype(pred.dtype)))), weight))


def _as_array(data: Union[np.ndarray, Sequence[SpiSequence]]) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data
    return np.stack([s.frames for s in data])


def train_step(model: CrrnModel, opt: Adam, clean: np.ndarray, cfg: TrainConfig, epsilon: float,
               rng: np.random.Generator) -> float:
    """One update on a batch ``(n, T, 2, h, w)``; returns the loss value."""
    dt = model.dtype
    clean = clean.astype(dt, copy=False)
    noisy = corrupt_input(clean, cfg.sigma_dn, cfg.p_zero, rng)
    T_len = clean.shape[1]
    inputs = [Tensor(np.ascontiguousarray(noisy[:, t])) for t in range(T_len)]
    targets = [Tensor(np.ascontiguousarray(clean[:, t])) for t in range(T_len)]
    opt.zero_grad()
    with Tape() as tape:
        outs = model.forward(inputs, FeedPolicy(epsilon, rng), targets)
        loss = masked_mse(outs, clean)
    value = loss.item()
    if not math.isfinite(value):
        return value
    tape.backward(loss)
    opt.step()
    return value


def train(model: CrrnModel, data, cfg: TrainConfig,
          callback: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Train on normal sequences; returns one ``{epoch, epsilon, loss}`` row per epoch.

    Raises :class:`NonFiniteLossError` as soon as a batch loss is NaN or Inf.
    """
    X = _as_array(data)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    model.train()
    history = []
    for epoch in range(cfg.epochs):
        eps = epsilon_schedule(epoch, cfg)
        order = rng.permutation(len(X))
        losses = []
        for b, start in enumerate(range(0, len(X), cfg.batch_size)):
            batch = X[order[start:start + cfg.batch_size]]
            value = train_step(model, opt, batch, cfg, eps, rng)
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b, value)
            losses.append(value * len(batch))
        row = {"epoch": epoch, "epsilon": eps, "loss": float(np.sum(losses) / len(X))}
        history.append(row)
        log.info("epoch %d eps %.3f loss %.6g", epoch, eps, row["loss"])
        if callback is not None:
            callback(row)
    model.eval()
    return history


def write_history(path, history: Sequence[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "epsilon", "loss"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({"epoch": row["epoch"], "epsilon": repr(float(row["epsilon"])),
                        "loss": repr(float(row["loss"]))})
