"""Adam optimizer and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, UsageError


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    step_count: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            step_count=0,
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    if lr <= 0:
        raise UsageError(f"adam_step: learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise UsageError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"state for {len(state.first_moment)}"
        )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            raise UsageError("adam_step: gradient missing; run backward() first")
        if g.shape != p.data.shape:
            raise DimensionError(
                f"adam_step: grad shape {g.shape} does not match param {p.data.shape}"
            )
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


@dataclass
class CosineSchedule:
    """Single-cycle cosine annealing from eta0 down to eta_min."""

    eta0: float = 1e-2
    eta_min: float = 1e-2 / 160
    total_epochs: int = 80

    def __post_init__(self):
        if self.total_epochs < 1:
            raise UsageError("CosineSchedule: total_epochs must be >= 1")
        if self.eta_min > self.eta0:
            raise UsageError(
                f"CosineSchedule: eta_min {self.eta_min} exceeds eta0 {self.eta0}"
            )


def lr_at(schedule: CosineSchedule, epoch: int) -> float:
    """Learning rate at an integer epoch in [0, total_epochs]."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise UsageError(
            f"lr_at: epoch {epoch} outside [0, {schedule.total_epochs}]"
        )
    span = schedule.eta0 - schedule.eta_min
    return schedule.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))
