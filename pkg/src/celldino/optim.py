"""AdamW with decoupled weight decay, plus the cosine schedule.

Parameters live in ordered name -> Tensor dicts; the optimizer is purely
functional and returns fresh parameter tensors so recorded graphs never
alias mutated storage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientRecord, Tensor

Params = dict[str, Tensor]


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Params, grads: GradientRecord, state: AdamWState, lr: float | None = None
) -> tuple[Params, AdamWState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Weight decay is applied as ``p -= lr * wd * p``, independent of the
    adaptive term. A parameter with no recorded gradient gets a zero
    gradient (its moments still decay). ``lr`` overrides ``state.lr`` for
    this step, for use with schedules.
    """
    step_lr = state.lr if lr is None else lr
    if step_lr <= 0:
        raise ValueError(f"learning rate must be positive, got {step_lr}")
    t = state.step + 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params: Params = {}
    new_state = AdamWState(
        lr=state.lr,
        weight_decay=state.weight_decay,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        step=t,
    )
    for name, p in params.items():
        g = grads.get(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float32)
            v = np.zeros(p.shape, dtype=np.float32)
        m = b1 * m + (np.float32(1.0) - b1) * g
        v = b2 * v + (np.float32(1.0) - b2) * (g * g)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        update = m_hat / (np.sqrt(v_hat) + np.float32(state.eps))
        data = (
            p.data
            - np.float32(step_lr) * update
            - np.float32(step_lr * state.weight_decay) * p.data
        )
        new_params[name] = Tensor(data, requires_grad=True)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_params, new_state


def cosine_schedule(step: int, total_steps: int, start: float, end: float) -> float:
    """Cosine interpolation from ``start`` (step 0) to ``end`` (step == total)."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return end + (start - end) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
