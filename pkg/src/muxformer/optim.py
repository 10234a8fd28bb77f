"""Adam with decoupled weight decay."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"  # or "cosine"

    def validate(self) -> "OptimizerConfig":
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        return self

    @classmethod
    def from_dict(cls, data: Mapping) -> "OptimizerConfig":
        return cls(**dict(data))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class AdamW:
    """In-place AdamW over a dict of float32 arrays.

    Decay is applied as ``p -= lr * wd * p`` before the Adam step, so a
    parameter with zero gradient shrinks by exactly ``lr * wd`` per step.
    """

    def __init__(self, cfg: OptimizerConfig, total_steps: int | None = None):
        self.cfg = cfg.validate()
        self.total_steps = total_steps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def lr_at(self, step: int) -> float:
        if self.cfg.schedule == "cosine" and self.total_steps:
            frac = min(step, self.total_steps) / self.total_steps
            return self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.cfg.lr

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> float:
        """Update ``params`` for every name in ``grads``; returns the lr used."""
        c = self.cfg
        lr = self.lr_at(self.t)
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name in sorted(grads):
            p, g = params[name], grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            if c.weight_decay:
                p -= np.float32(lr * c.weight_decay) * p
            p -= np.float32(lr) * (m / np.float32(bc1)) / (np.sqrt(v / np.float32(bc2)) + np.float32(c.eps))
        return lr
