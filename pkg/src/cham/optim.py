"""Adam with bias correction and a two-stage step learning rate."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_after: float = 1e-5
    lr_switch_iter: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_iters: int = 500
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr_initial > 0 and self.lr_after > 0):
            raise ValueError(f"learning rates must be positive, got {self.lr_initial}, "
                             f"{self.lr_after}")
        if self.lr_switch_iter < 0:
            raise ValueError(f"lr_switch_iter must be >= 0, got {self.lr_switch_iter}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 0 or self.eval_every < 1:
            raise ValueError(f"need max_iters >= 0 and eval_every >= 1, got "
                             f"{self.max_iters}, {self.eval_every}")

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    t: int = 0

    @classmethod
    def fresh(cls, params) -> "AdamState":
        return cls(OrderedDict((k, np.zeros_like(p)) for k, p in params.items()),
                   OrderedDict((k, np.zeros_like(p)) for k, p in params.items()), 0)

    def copy(self) -> "AdamState":
        return AdamState(OrderedDict((k, a.copy()) for k, a in self.m.items()),
                         OrderedDict((k, a.copy()) for k, a in self.v.items()), self.t)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """0-based iteration counter; the reduced rate applies from ``lr_switch_iter`` on."""
    return cfg.lr_initial if iteration < cfg.lr_switch_iter else cfg.lr_after


def adam_step(params, grads, state: AdamState, cfg: TrainConfig, lr: float):
    """Update ``params`` in place. Raises FloatingPointError on a non-finite gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape or state.m[name].shape != g.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {params[name].shape}, "
                             f"grad {g.shape}, moment {state.m[name].shape}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    return params, state
