"""AdamW with decoupled weight decay and a linear warm-up / linear decay schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    warmup: int = 100
    steps: int = 2000
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    grad_accum: int = 1
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.warmup < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("invalid optimizer settings")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Learning rate for optimizer step ``step`` (0-based)."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    frac = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * (1.0 - (1.0 - cfg.min_lr_ratio) * frac)


class AdamW:
    def __init__(self, params: dict, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        cfg = self.cfg
        lr = lr_at(self.step_count, cfg)
        if cfg.grad_clip:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
            scale = min(1.0, cfg.grad_clip / (norm + 1e-12))
        else:
            scale = 1.0
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - cfg.beta1**t
        bc2 = 1 - cfg.beta2**t
        for k, p in self.params.items():
            g = grads[k] * p.data.dtype.type(scale)
            dt = p.data.dtype.type
            self.m[k] = dt(cfg.beta1) * self.m[k] + dt(1 - cfg.beta1) * g
            self.v[k] = dt(cfg.beta2) * self.v[k] + dt(1 - cfg.beta2) * g * g
            mhat = self.m[k] / dt(bc1)
            vhat = self.v[k] / dt(bc2)
            p.data = p.data - dt(lr) * (mhat / (np.sqrt(vhat) + dt(cfg.eps)) + dt(cfg.weight_decay) * p.data)
        return lr

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int):
        for k in self.params:
            self.m[k] = np.array(arrays[f"m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(arrays[f"v.{k}"], dtype=self.params[k].data.dtype)
        self.step_count = int(step_count)
