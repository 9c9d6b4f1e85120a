"""Ramp-up of the attention weight and plateau decay of the learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class RampSchedule:
    ramp_length: int = 1
    w_max: float = 1.0
    shape: str = "exponential"

    def __post_init__(self):
        if self.ramp_length < 1:
            raise ValueError("ramp_length must be >= 1")
        if not 0.0 <= self.w_max <= 1.0:
            raise ValueError("w_max must lie in [0, 1]")
        if self.shape != "exponential":
            raise ValueError(f"unsupported ramp shape {self.shape!r}")


@dataclass
class PlateauPolicy:
    decay_factor: float = 0.1
    patience: int = 5
    tolerance: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def rampup_w(t: int, schedule: RampSchedule) -> float:
    """``w_max * exp(-5 (1 - t/L)^2)`` for ``t < L``, then ``w_max``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t >= schedule.ramp_length:
        return schedule.w_max
    phase = 1.0 - t / schedule.ramp_length
    return schedule.w_max * math.exp(-5.0 * phase * phase)


def plateau_step(history, current_lr: float, policy: PlateauPolicy) -> float:
    """Decay ``current_lr`` when the last ``patience`` losses did not improve.

    ``history`` holds the per-epoch training losses since the last decay. A
    decay needs at least one earlier loss to compare against.
    """
    history = list(history)
    if not history:
        raise ValueError("history must not be empty")
    if len(history) <= policy.patience:
        return current_lr
    recent = min(history[-policy.patience:])
    before = min(history[:-policy.patience])
    if recent < before - policy.tolerance:
        return current_lr
    return current_lr * policy.decay_factor


@dataclass
class PlateauScheduler:
    """Stateful wrapper around :func:`plateau_step` that restarts its window after a decay."""

    lr: float
    policy: PlateauPolicy = field(default_factory=PlateauPolicy)
    history: list[float] = field(default_factory=list)

    def step(self, loss: float) -> float:
        self.history.append(float(loss))
        new_lr = plateau_step(self.history, self.lr, self.policy)
        if new_lr != self.lr:
            # the loss that triggered the decay becomes the new reference
            self.history = [self.history[-1]]
            self.lr = new_lr
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "history": list(self.history)}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.history = list(state["history"])
