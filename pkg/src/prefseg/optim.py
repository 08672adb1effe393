"""Adam / AdamW with constant or cosine-with-warmup learning rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import SegmenterParams

__all__ = ["Schedule", "OptimizerState", "make_optimizer", "lr_multiplier", "optimizer_step"]


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"  # "constant" | "cosine"
    total_steps: int = 0
    warmup_fraction: float = 0.05
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")


def lr_multiplier(schedule: Schedule, step: int) -> float:
    """Multiplier applied at update number ``step`` (1-based)."""
    if schedule.kind == "constant":
        return 1.0
    total = max(int(schedule.total_steps), 1)
    warmup = int(math.ceil(schedule.warmup_fraction * total))
    if warmup > 0 and step <= warmup:
        return step / warmup
    progress = min(max((step - warmup) / max(total - warmup, 1), 0.0), 1.0)
    cos = 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule.floor + (1.0 - schedule.floor) * cos


@dataclass
class OptimizerState:
    kind: str = "adamw"  # "adam" | "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: Schedule = field(default_factory=Schedule)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def make_optimizer(params: SegmenterParams, kind="adamw", lr=1e-3, weight_decay=0.0, schedule=None, **kw):
    if kind not in ("adam", "adamw"):
        raise ValueError(f"unknown optimizer {kind!r}")
    return OptimizerState(
        kind=kind,
        lr=lr,
        weight_decay=weight_decay,
        schedule=schedule or Schedule(),
        m=params.zeros_like(),
        v=params.zeros_like(),
        **kw,
    )


def optimizer_step(state: OptimizerState, params: SegmenterParams, grads: dict):
    """One bias-corrected Adam/AdamW update. Returns ``(new_params, new_state)``.

    ``adam`` folds weight decay into the gradient (L2); ``adamw`` decays the
    weights directly. Raises ``FloatingPointError`` on non-finite gradients,
    leaving the inputs untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    b1, b2 = state.betas
    t = state.step + 1
    lr = state.lr * lr_multiplier(state.schedule, t)
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in params.arrays.items():
        g = grads[name]
        if state.kind == "adam" and state.weight_decay:
            g = g + state.weight_decay * p
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        if state.kind == "adamw" and state.weight_decay:
            p = p * (1 - lr * state.weight_decay)
        new_arrays[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return SegmenterParams(params.arch, new_arrays), new_state
