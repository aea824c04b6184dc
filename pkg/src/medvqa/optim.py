"""AdamW with decoupled weight decay and the warmup-cosine learning schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class ScheduleConfig:
    """Linear warmup from warmup_lr to max_lr, then cosine decay to min_lr."""

    max_lr: float
    warmup_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_lr > self.max_lr:
            raise ValueError(f"warmup_lr {self.warmup_lr} exceeds max_lr {self.max_lr}")
        if self.min_lr > self.max_lr:
            raise ValueError(f"min_lr {self.min_lr} exceeds max_lr {self.max_lr}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps} / {self.total_steps}")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate for a given optimizer step, 0 <= step <= total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.warmup_lr + frac * (cfg.max_lr - cfg.warmup_lr)
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def decay_eligible(param: Parameter) -> bool:
    """Weight decay skips biases, norm gains and embedding tables."""
    if param.tensor.ndim < 2:
        return False
    leaf = param.name.rsplit(".", 1)[-1]
    if "embed" in leaf:
        return False
    return True


@dataclass
class OptimizerState:
    """Per-parameter first/second moments for AdamW, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: list[Parameter], state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update over the trainable parameters.

    Moments are bias-corrected by the step count; decay multiplies eligible
    weights by (1 - lr * weight_decay) independently of the gradient path.
    Non-trainable parameters are left untouched.
    """
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.tensor.grad is None:
            raise ValueError(f"missing gradient on trainable parameter {p.name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step

    for p in trainable:
        g = p.tensor.grad
        m = state.m.setdefault(p.name, np.zeros_like(p.tensor.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.tensor.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        w = p.tensor.data.copy()
        if state.weight_decay and decay_eligible(p):
            w *= 1.0 - lr * state.weight_decay
        w -= lr * update
        p.tensor.data = w
