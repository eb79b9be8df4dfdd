"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autograd import NumericalError, Parameter


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def default_decay(param: Parameter) -> bool:
    """Matrices decay; biases, norms, temperatures and the class token do not."""
    return param.data.ndim >= 2


def adamw_step(params: Iterable[Parameter], state: OptimizerState, lr: float,
               weight_decay: float = 0.0, decay=default_decay) -> None:
    """One AdamW update from the ``grad`` already stored on each parameter.

    Parameters with a ``lower_bound`` are clamped to it afterwards.
    """
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer moments for {p.name!r} have shape {m.shape}, parameter {p.data.shape}")
        if weight_decay and decay(p):
            p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        if p.lower_bound is not None:
            low = p.data < p.lower_bound
            if low.any():
                p.data[low] = p.lower_bound
                p.clamp_events += int(low.sum())


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then a half cosine down to 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
