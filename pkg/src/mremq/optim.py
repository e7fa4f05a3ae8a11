"""AdamW with decoupled weight decay and a linear learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .autograd import Tensor
from .quant import MIN_STEP


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def linear_lr(t: int, total: int, eta0: float) -> float:
    if total <= 0:
        return eta0
    return eta0 * (1.0 - t / total)


def adamw_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                 beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
    """In-place AdamW step on ``param``; ``state`` is advanced."""
    if grad.shape != param.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    if weight_decay:
        param -= lr * weight_decay * param
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)


@dataclass
class AdamW:
    """Optimizer over a fixed, named parameter set.

    Parameters whose name starts with ``qspec/`` are step sizes and are
    clamped to stay positive after every update.
    """

    params: Mapping[str, Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: Dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        self.params = dict(self.params)
        for k, p in self.params.items():
            self.state[k] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))

    def step(self, grads: Mapping[Tensor, np.ndarray], lr: float) -> None:
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {k}")
            adamw_update(p.data, g, self.state[k], lr, self.beta1, self.beta2, self.eps, self.weight_decay)
            if k.startswith("qspec/"):
                np.maximum(p.data, MIN_STEP, out=p.data)
