"""Reconstruction objectives, annealed teacher forcing and the per-module step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import AdamW, TrainingError, linear_lr
from .partition import ModuleView


@dataclass(frozen=True)
class Schedule:
    """Step budget ``T``, teacher-forcing horizon ``T0`` and initial learning rate."""

    T: int
    T0: int
    eta0: float

    def __post_init__(self):
        if not 0 <= self.T0 <= self.T:
            raise ValueError(f"need 0 <= T0 <= T, got T0={self.T0}, T={self.T}")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")

    @classmethod
    def from_fraction(cls, T: int, fraction: float, eta0: float) -> "Schedule":
        return cls(T, int(round(fraction * T)), eta0)


def rem_loss(out_q: Tensor, out_fp) -> Tensor:
    """Mean squared distance between quantized and full-precision matmul outputs."""
    return ag.mse(out_q, out_fp)


def mrem_loss(fhat: Sequence[Tensor], f: Sequence) -> Tensor:
    """Sum over the module's outputs of the per-tensor mean squared error."""
    if len(fhat) != len(f) or not fhat:
        raise ValueError(f"mrem_loss needs equal, non-empty lists ({len(fhat)} vs {len(f)})")
    total = None
    for a, b in zip(fhat, f):
        term = ag.mse(a, b)
        total = term if total is None else ag.add(total, term)
    return total


def lambda_schedule(t: int, T0: int) -> float:
    if t < 0:
        raise ValueError("step must be non-negative")
    if T0 <= 0:
        return 0.0
    return max(1.0 - t / T0, 0.0)


def teacher_force(f: np.ndarray, fhat: np.ndarray, lam: float) -> np.ndarray:
    """``lam * f + (1 - lam) * fhat``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    f, fhat = np.asarray(f), np.asarray(fhat)
    if f.shape != fhat.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {fhat.shape}")
    if lam == 1.0:
        return f
    if lam == 0.0:
        return fhat
    return (lam * f + (1.0 - lam) * fhat).astype(fhat.dtype)


@dataclass
class StepResult:
    f_out: np.ndarray
    fhat_out: np.ndarray
    loss: float
    lam: float
    lr: float


def mrem_step(fp: ModuleView, q: ModuleView, f_in, fhat_in, t: int, sched: Schedule,
              opt: AdamW, teacher_forcing: bool = True) -> StepResult:
    """One optimizer step on module ``q`` against the frozen module ``fp``.

    While ``t < T0`` the quantized module reads the mix of the full-precision and
    quantized inputs; afterwards it reads its own quantized input. Only ``q``'s
    parameters and step sizes are updated. The returned pair are the boundary
    outputs computed in this step (before the update).
    """
    lam = lambda_schedule(t, sched.T0) if teacher_forcing else 0.0
    if q.first:
        q_in = fhat_in
    elif teacher_forcing and t < sched.T0:
        q_in = teacher_force(f_in, fhat_in, lam)
    else:
        q_in = fhat_in
    with ag.no_grad():
        f_outs = [o.data for o in fp.forward(f_in)]
    fhat_outs = q.forward(q_in)
    loss = mrem_loss(fhat_outs, f_outs)
    val = float(loss.data)
    if not np.isfinite(val):
        raise TrainingError(f"module {q.n}: non-finite loss at step {t}")
    grads = ag.backward(loss)
    lr = linear_lr(t, sched.T, sched.eta0)
    opt.step(grads, lr)
    bi = q.boundary_index
    return StepResult(f_outs[bi], fhat_outs[bi].data, val, lam, lr)
