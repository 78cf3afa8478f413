"""Adam with an exponential warm-up / decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import NonFiniteError


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    warmup_steps: int = 200
    decay_rate: float = 0.9
    decay_steps: int = 1000
    warmup_floor: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at_step(state: OptimizerState, step: int | None = None) -> float:
    """Exponential ramp from ``base_lr * warmup_floor`` to ``base_lr``, then
    exponential decay by ``decay_rate`` every ``decay_steps`` steps."""
    t = state.step if step is None else step
    if t < 0:
        raise ValueError("step must be >= 0")
    if t < state.warmup_steps:
        return state.base_lr * state.warmup_floor ** (1.0 - t / state.warmup_steps)
    return state.base_lr * state.decay_rate ** ((t - state.warmup_steps) / state.decay_steps)


def adam_update(params: dict, grads: dict, state: OptimizerState) -> float:
    """In-place Adam step over every key of ``grads``; returns the lr used.

    A non-finite gradient raises :class:`NonFiniteError` before anything is
    modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.step}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    lr = lr_at_step(state)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= p.dtype.type(b1)
        m += p.dtype.type(1 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1 - b2) * g * g
        p -= p.dtype.type(lr) * (m / p.dtype.type(c1)) / (np.sqrt(v / p.dtype.type(c2)) + p.dtype.type(state.eps))
    state.step = t
    return lr
