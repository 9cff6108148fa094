"""Adam / AdamW and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: OptimizerState):
    """One in-place Adam update with bias correction.

    With ``state.weight_decay > 0`` this is AdamW: parameters additionally
    shrink by ``lr * weight_decay * p``, decoupled from the gradient moments.
    Entries of ``grads`` that are None leave their parameter untouched.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= (state.lr * update).astype(p.dtype, copy=False)
    return params


class Adam:
    """Optimizer over a list of trainable ``Tensor`` objects."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(lr, beta1, beta2, eps, weight_decay)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


class AdamW(Adam):
    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        super().__init__(params, lr, beta1, beta2, eps, weight_decay)


def cosine_schedule(step: int, total: int, lr0: float) -> float:
    if total < 1 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total and total >= 1, got {step}/{total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))
