"""Parameter optimizers: SGD with momentum and Adam, with an optional cosine schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError


def cosine_lr(lr0, step, total_steps):
    """``0.5 * lr0 * (1 + cos(pi * t / T))``, clamped to 0 past ``T``."""
    if total_steps <= 0:
        return lr0
    t = min(step, total_steps)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    mode: str  # "sgd-momentum" | "adam"
    lr: float
    total_steps: int = 0
    schedule: str = "constant"  # "constant" | "cosine"
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)
    param_steps: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.betas = tuple(self.betas)

    def current_lr(self):
        if self.schedule == "cosine":
            return cosine_lr(self.lr, self.step, self.total_steps)
        return self.lr


def sgd_momentum(lr, momentum=0.9, weight_decay=0.0, total_steps=0, schedule="cosine"):
    return OptimizerState("sgd-momentum", lr, total_steps=total_steps, schedule=schedule,
                          weight_decay=weight_decay, momentum=momentum)


def adam(lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    return OptimizerState("adam", lr, betas=betas, eps=eps, weight_decay=weight_decay)


def optimizer_step(params, grads, state):
    """Update ``params[name].data`` in place from ``grads[name]``.

    Only names present in ``grads`` are touched, so excluding a parameter from
    ``grads`` leaves both the value and its optimizer buffers unchanged.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError("non-finite gradient", parameter=name)
    lr = state.current_lr()
    for name in sorted(grads):
        p = params[name].data
        g = np.asarray(grads[name], dtype=p.dtype)
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.mode == "sgd-momentum":
            v = state.buffers.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.buffers[name] = v
            p -= lr * v
        else:
            b1, b2 = state.betas
            m, v = state.buffers.get(name, (np.zeros_like(p), np.zeros_like(p)))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            t = state.param_steps.get(name, 0) + 1
            state.param_steps[name] = t
            state.buffers[name] = (m, v)
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + state.eps)
    state.step += 1
    return params, state
