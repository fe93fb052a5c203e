"""Adam and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfig, MissingGradient
from .store import ParameterStore


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    clip_norm: float | None = None  # off by default

    def make_state(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, factor=self.plateau_factor,
                              patience=self.plateau_patience, clip_norm=self.clip_norm)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # plateau schedule
    factor: float = 0.1
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 0.0
    best_metric: float = math.inf
    bad_epochs: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfig(f"learning rate must be positive, got {self.lr}")


def adam_step(store: ParameterStore, state: OptimizerState) -> None:
    """One bias-corrected Adam update over every parameter in ``store``.

    Gradients are zeroed afterwards. A parameter that received no gradient
    since the previous step raises :class:`MissingGradient`; pass a subset
    store to update only part of a model.
    """
    for name, p in store.items():
        if not p.grad_seen:
            raise MissingGradient(name)
    if state.clip_norm is not None:
        total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for _, p in store.items()))
        if total > state.clip_norm:
            for _, p in store.items():
                p.grad *= state.clip_norm / total
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        p.zero_grad()


def plateau_decay(state: OptimizerState, val_metric: float) -> bool:
    """Feed one validation metric (lower is better); returns True if lr was cut.

    Improvement means beating the best value by a relative ``threshold``.
    The rate is multiplied by ``factor`` once more than ``patience``
    consecutive epochs pass without improvement, then the counter restarts.
    """
    best = state.best_metric
    if math.isinf(best) or val_metric < best - state.threshold * abs(best):
        state.best_metric = val_metric
        state.bad_epochs = 0
        return False
    state.bad_epochs += 1
    if state.bad_epochs > state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.bad_epochs = 0
        return True
    return False
