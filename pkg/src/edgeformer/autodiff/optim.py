from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place to the arrays in `params`.

    Parameters without an entry in `grads` are left untouched (their moments too).
    Returns ``(params, state)``.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: base_lr * gamma ** (number of milestones <= epoch)."""

    base_lr: float = 1e-6
    milestones: tuple = (75, 150)
    gamma: float = 0.1

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly ascending")
        if not (self.base_lr > 0 and self.gamma > 0):
            raise ValueError("base_lr and gamma must be positive")
        object.__setattr__(self, "milestones", ms)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    passed = bisect.bisect_right(schedule.milestones, epoch)
    lr = schedule.base_lr
    for _ in range(passed):
        lr *= schedule.gamma
    # repeated float multiplication drifts (1e-6 * 0.1 != 1e-7); snap to the decimal value
    return float(f"{lr:.12g}")
