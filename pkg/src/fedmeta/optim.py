"""Plain SGD with a per-epoch learning-rate schedule."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .params import ParameterSet

SCHEDULES = ("constant", "cosine-to-floor")


@dataclass(frozen=True)
class SgdConfig:
    initial_lr: float = 1e-3
    schedule: str = "cosine-to-floor"
    lr_floor: float = 1e-5
    total_epochs: int = 1

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise DomainError(f"unknown schedule {self.schedule!r}")
        if self.initial_lr < 0 or self.lr_floor < 0:
            raise DomainError("learning rates must be nonnegative")
        if self.lr_floor > self.initial_lr:
            raise DomainError("lr_floor exceeds initial_lr")
        if self.total_epochs < 1:
            raise DomainError("total_epochs must be positive")

    def lr(self, epoch: int) -> float:
        if not 0 <= epoch < self.total_epochs:
            raise DomainError(f"epoch {epoch} outside [0, {self.total_epochs})")
        if self.schedule == "constant" or self.total_epochs == 1:
            return self.initial_lr
        frac = epoch / (self.total_epochs - 1)
        return self.lr_floor + 0.5 * (self.initial_lr - self.lr_floor) * (1.0 + math.cos(math.pi * frac))


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], cfg: SgdConfig,
             epoch: int) -> ParameterSet:
    """Return ``p - lr(epoch) * g`` for every parameter present in ``grads``."""
    lr = cfg.lr(epoch)
    extra = set(grads) - set(params)
    if extra:
        raise ShapeError(f"gradients for unknown parameters: {sorted(extra)}")
    entries = dict(params.items())
    step = np.float32(lr)
    for name, g in grads.items():
        p = entries[name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad dims {g.shape} != param dims {p.shape}")
        entries[name] = (p - step * g.astype(np.float32, copy=False)).astype(np.float32, copy=False)
    return ParameterSet(entries, params.partition)
