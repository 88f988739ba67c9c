"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Parameter


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    clip_norm: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: Iterable[Parameter], state: OptimState, cfg: AdamWConfig) -> None:
    """One decoupled AdamW update of every trainable parameter, in place.

    Frozen parameters are skipped entirely and never get moment buffers.
    A trainable parameter without a gradient is treated as having g = 0.
    """
    params = [p for p in params if p.trainable]
    grads = {}
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {p.name}")
        grads[p.name] = g
    if cfg.clip_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > cfg.clip_norm:
            scale = cfg.clip_norm / total
            grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t if cfg.bias_correction else 1.0
    c2 = 1.0 - b2 ** t if cfg.bias_correction else 1.0
    for p in params:
        g = grads[p.name]
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = p.data - cfg.lr * update - cfg.lr * cfg.weight_decay * p.data
        if not np.isfinite(p.data).all():
            raise NumericError(f"parameter {p.name} became non-finite")


class AdamW:
    """Small stateful wrapper around :func:`adamw_step`."""

    def __init__(self, params: Iterable[Parameter], cfg: AdamWConfig | None = None, **kw):
        self.params = list(params)
        self.cfg = cfg or AdamWConfig(**kw)
        self.state = OptimState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, self.state, self.cfg)
