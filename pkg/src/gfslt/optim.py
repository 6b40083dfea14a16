"""Cosine learning-rate schedule, SGD with momentum, gradient clipping."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .numerics import NumericError, ParameterStore


def cosine_lr(step: int, total_steps: int, lr_max: float = 0.01, lr_min: float = 1e-5) -> float:
    """Half-cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if total_steps <= 0 or step >= total_steps:
        return lr_min if step >= total_steps else lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


def clip_global_norm(params: ParameterStore, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [t.grad for _, t in params.items() if t.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, t.grad.dtype)
    return norm


class SGDMomentum:
    """``buf <- momentum * buf + grad``; ``param <- param - lr * buf``."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: ParameterStore, lr: float, skip: Iterable[str] = ()):
        skip = set(skip)
        for name, t in params.items():
            if name in skip or t.grad is None:
                continue
            g = t.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
            buf = self.buffers.get(name)
            if buf is None:
                buf = g.astype(t.data.dtype, copy=True)
            else:
                buf *= self.momentum
                buf += g
            self.buffers[name] = buf
            t.data -= np.asarray(lr, t.data.dtype) * buf

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.buffers)

    def load_state(self, buffers: dict[str, np.ndarray]):
        self.buffers = {k: np.array(v, dtype=np.float32) for k, v in buffers.items()}


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, buf: np.ndarray | None,
                      lr: float, momentum: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Functional single-tensor update returning ``(new_param, new_buffer)``."""
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient")
    buf = grad.copy() if buf is None else momentum * buf + grad
    return param - lr * buf, buf
