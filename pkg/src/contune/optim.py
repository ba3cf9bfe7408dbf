"""Parameter bookkeeping and SGD with warmup + cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError


class ParamRegistry:
    """Named, ordered sets of trainable and frozen tensors.

    A tensor lives in exactly one of the two sets; frozen tensors are
    never touched by the optimizer.
    """

    def __init__(self):
        self._trainable: dict[str, Tensor] = {}
        self._frozen: dict[str, Tensor] = {}

    def add_trainable(self, name: str, t: Tensor):
        self._check_new(name, t)
        t.requires_grad = True
        self._trainable[name] = t

    def add_frozen(self, name: str, t: Tensor):
        self._check_new(name, t)
        t.requires_grad = False
        self._frozen[name] = t

    def _check_new(self, name: str, t: Tensor):
        if name in self._trainable or name in self._frozen:
            raise ContractError(f"parameter name already registered: {name}")
        for other in list(self._trainable.values()) + list(self._frozen.values()):
            if other is t:
                raise ContractError("tensor already registered under another name")

    def trainable(self):
        return self._trainable.items()

    def frozen(self):
        return self._frozen.items()

    def num_trainable_values(self) -> int:
        return sum(t.data.size for t in self._trainable.values())

    def zero_grad(self):
        for t in self._trainable.values():
            t.grad = None

    def ensure_grads(self):
        """Give zero gradients to trainable params absent from the last graph.

        A parameter a loss never touched (unselected pool entry, unused
        feature path) has gradient exactly zero; callers state that
        explicitly before sgd_step's missing-grad contract check.
        """
        for t in self._trainable.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, then cosine decay to (near) zero."""

    base_lr: float
    warmup_ratio: float
    total_steps: int
    kind: str = "cosine"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.kind != "cosine":
            raise ConfigError(f"unknown schedule kind: {self.kind}")

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup_ratio * self.total_steps))

    def lr(self, step: int) -> float:
        w = self.warmup_steps
        if step < w:
            return self.base_lr * step / w
        span = max(self.total_steps - w, 1)
        progress = min((step - w) / span, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(registry: ParamRegistry, schedule: LrSchedule, step: int):
    """p <- p - lr(step) * grad for every trainable p; grads are cleared."""
    lr = schedule.lr(step)
    for name, p in registry.trainable():
        if p.grad is None:
            raise ContractError(f"sgd_step: trainable parameter {name!r} has no grad")
    for _, p in registry.trainable():
        p.data -= lr * p.grad
        p.grad = None


class SgdOptimizer:
    """SGD with the optional momentum hook; momentum 0 is plain sgd_step."""

    def __init__(self, registry: ParamRegistry, schedule: LrSchedule,
                 momentum: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        self.registry = registry
        self.schedule = schedule
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, step_index: int):
        if self.momentum == 0.0:
            sgd_step(self.registry, self.schedule, step_index)
            return
        lr = self.schedule.lr(step_index)
        for name, p in self.registry.trainable():
            if p.grad is None:
                raise ContractError(f"step: trainable parameter {name!r} has no grad")
        for name, p in self.registry.trainable():
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + p.grad
            self._velocity[name] = v
            p.data -= lr * v
            p.grad = None
