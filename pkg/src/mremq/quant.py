"""Uniform (symmetric / asymmetric) and ternary quantizers with straight-through gradients.

Numeric functions take and return numpy arrays. :func:`fake_quant` and
:func:`quantize_weight` are the autograd-aware versions used inside the model.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .autograd import Tensor, make_node, unbroadcast

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
TERNARY = "ternary"
PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"

MIN_STEP = 1e-8


class QuantError(ValueError):
    """Invalid quantizer configuration or input."""


@dataclass
class QuantSpec:
    """Configuration and (learnable) step size of one quantization site.

    ``step`` is a Tensor whose shape broadcasts against the quantized tensor:
    ``()`` for per-tensor, e.g. ``(1, d_out)`` for per-channel weights. Ternary
    sites carry no step; their scale is recomputed from the weights each call.
    """

    bits: int
    mode: str = SYMMETRIC
    granularity: str = PER_TENSOR
    step: Optional[Tensor] = None
    learnable: bool = True
    channel_axis: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.bits < 2:
            raise QuantError(f"bits must be >= 2, got {self.bits}")
        if self.mode not in (SYMMETRIC, ASYMMETRIC, TERNARY):
            raise QuantError(f"unknown mode {self.mode!r}")
        if self.mode == TERNARY and self.bits != 2:
            raise QuantError("ternary quantization implies bits == 2")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise QuantError(f"unknown granularity {self.granularity!r}")

    @property
    def qrange(self) -> Tuple[int, int]:
        return qrange(self.bits, self.mode)

    def step_array(self) -> np.ndarray:
        if self.step is None:
            raise QuantError(f"site {self.name or '?'} has no step size")
        s = self.step.data
        if np.any(s <= 0):
            raise QuantError(f"step sizes must be positive (site {self.name or '?'})")
        return s


def qrange(bits: int, mode: str) -> Tuple[int, int]:
    """Integer clip range ``[Q_N, Q_P]``."""
    if mode == ASYMMETRIC:
        return 0, 2 ** bits - 1
    return -(2 ** (bits - 1)) + 1, 2 ** (bits - 1) - 1


def round_half_away(z: np.ndarray) -> np.ndarray:
    return np.trunc(z + np.copysign(0.5, z))


def _uniform(x, step, bits, mode):
    s = np.asarray(step)
    if np.any(s <= 0):
        raise QuantError("step size must be positive")
    lo, hi = qrange(bits, mode)
    x = np.asarray(x)
    return s * np.clip(round_half_away(x / s), lo, hi)


def quantize_symmetric(x, spec: QuantSpec) -> np.ndarray:
    """``s * clip(round(x / s), -2^(b-1)+1, 2^(b-1)-1)``."""
    if spec.mode != SYMMETRIC:
        raise QuantError(f"expected a symmetric spec, got {spec.mode}")
    return _uniform(x, spec.step_array(), spec.bits, SYMMETRIC)


def quantize_asymmetric(x, spec: QuantSpec) -> np.ndarray:
    """Zero-anchored grid ``s * {0, ..., 2^b - 1}``; negatives clip to 0."""
    if spec.mode != ASYMMETRIC:
        raise QuantError(f"expected an asymmetric spec, got {spec.mode}")
    return _uniform(x, spec.step_array(), spec.bits, ASYMMETRIC)


def quantize_per_channel(w, steps, spec: QuantSpec) -> np.ndarray:
    """Quantize row ``i`` of ``w[d_out, d_in]`` with ``steps[i]``."""
    w = np.asarray(w)
    steps = np.asarray(steps, dtype=w.dtype)
    if steps.ndim != 1 or steps.shape[0] != w.shape[0]:
        raise QuantError(f"need {w.shape[0]} per-row steps, got shape {steps.shape}")
    if spec.mode == TERNARY:
        raise QuantError("per-channel ternary uses ternarize_twn(channel_axis=0)")
    return _uniform(w, steps[:, None], spec.bits, spec.mode)


@dataclass
class TernaryResult:
    quantized: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray


def ternarize_twn(w, channel_axis: Optional[int] = None) -> TernaryResult:
    """Ternary weights: threshold ``0.7 * mean|w|``, scale = mean of surviving ``|w|``.

    With ``channel_axis`` the statistics are taken separately for every slice
    along that axis (row-wise ternarization).
    """
    w = np.asarray(w)
    if w.size == 0:
        raise QuantError("cannot ternarize an empty tensor")
    a = np.abs(w)
    if channel_axis is None:
        axes = None
    else:
        axes = tuple(i for i in range(w.ndim) if i != channel_axis % w.ndim)
    delta = 0.7 * a.mean(axis=axes, keepdims=axes is not None)
    mask = a > delta
    cnt = mask.sum(axis=axes, keepdims=axes is not None)
    tot = np.where(mask, a, 0).sum(axis=axes, keepdims=axes is not None)
    alpha = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0).astype(w.dtype)
    q = (alpha * np.sign(w) * mask).astype(w.dtype)
    return TernaryResult(q, np.asarray(alpha), np.asarray(delta, dtype=w.dtype))


def init_step_size(x, bits: int, mode: str) -> float:
    """LSQ-style initial step, ``2 * mean|x| / sqrt(Q_P)``, floored at ``MIN_STEP``."""
    x = np.asarray(x)
    if x.size == 0:
        raise QuantError("cannot initialize a step from an empty tensor")
    qp = qrange(bits, mode)[1]
    return max(2.0 * float(np.abs(x).mean()) / math.sqrt(qp), MIN_STEP)


def init_step_per_channel(w, bits: int, mode: str, channel_axis: int) -> np.ndarray:
    """Per-channel LSQ init; result keeps dims so it broadcasts against ``w``."""
    w = np.asarray(w)
    axes = tuple(i for i in range(w.ndim) if i != channel_axis % w.ndim)
    qp = qrange(bits, mode)[1]
    s = 2.0 * np.abs(w).mean(axis=axes, keepdims=True) / math.sqrt(qp)
    return np.maximum(s, MIN_STEP).astype(w.dtype)


def _ste_parts(x, s, lo, hi):
    # clip before rounding: the bounds are integers, so the result is the same
    q = x / s
    qc = np.clip(q, lo, hi)
    r = round_half_away(qc)
    inside = q == qc
    # round(q) - q in range; the clip bound (== r) outside
    gs = r - q * inside
    return q, r, inside, gs


def ste_backward(x, spec: QuantSpec, upstream) -> Tuple[np.ndarray, np.ndarray]:
    """LSQ straight-through gradients of ``quantize(x; s)``.

    ``grad_x`` passes ``upstream`` where ``Q_N <= x/s <= Q_P`` and is zero
    outside. The step gradient per element is ``round(q) - q`` in range and
    ``Q_P`` / ``Q_N`` when clipped, weighted by ``upstream`` and summed down to
    the step's shape.
    """
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise QuantError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    s = spec.step_array()
    lo, hi = spec.qrange
    _, _, inside, gs = _ste_parts(x, s, lo, hi)
    return upstream * inside, unbroadcast(upstream * gs, s.shape)


# ------------------------------------------------------------------ autograd

_frozen = threading.local()


@contextlib.contextmanager
def frozen_rounding():
    """Freeze rounding residuals and clip masks at the first evaluation.

    Inside the block every quantizer becomes the smooth surrogate its STE
    gradient describes: ``x + s * r`` in range (``r`` fixed), ``s * Q_P`` /
    ``s * Q_N`` when clipped, ``w + (w_hat - w)`` for ternary weights. At the
    recording call the surrogate equals the real quantizer, so finite
    differences of the surrogate check backprop through quantized graphs.
    """
    cache: dict = {}
    prev = getattr(_frozen, "cache", None)
    _frozen.cache = cache
    try:
        yield cache
    finally:
        _frozen.cache = prev


def _frozen_cache():
    return getattr(_frozen, "cache", None)


def fake_quant(x: Tensor, spec: QuantSpec) -> Tensor:
    """Uniform quantization of ``x`` with gradients to ``x`` and ``spec.step``."""
    st = spec.step
    s = spec.step_array()
    lo, hi = spec.qrange
    xd = x.data
    cache = _frozen_cache()
    if cache is not None and id(spec) in cache:
        r, inside, above = cache[id(spec)]
        clipped = np.where(above, hi, lo)
        out = np.where(inside, xd + s * r, s * clipped).astype(xd.dtype)
        gs = np.where(inside, r, clipped)
    else:
        q, r, inside, gs = _ste_parts(xd, s, lo, hi)
        out = (r * s).astype(xd.dtype, copy=False)
        if cache is not None:
            cache[id(spec)] = (r - q, inside, q > hi)
    sshape = s.shape

    def bw(g):
        return g * inside, unbroadcast(g * gs, sshape)

    return make_node(out, (x, st), "fake_quant", bw)


def ternary_quant(w: Tensor, spec: QuantSpec) -> Tensor:
    """TWN ternarization; the latent weight gets the upstream gradient unchanged."""
    cache = _frozen_cache()
    if cache is not None and id(spec) in cache:
        out = w.data + cache[id(spec)]
    else:
        out = ternarize_twn(w.data, spec.channel_axis).quantized
        if cache is not None:
            cache[id(spec)] = out - w.data
    return make_node(out, (w,), "ternary", lambda g: (g,))


def quantize_weight(w: Tensor, spec: QuantSpec) -> Tensor:
    if spec.mode == TERNARY:
        return ternary_quant(w, spec)
    return fake_quant(w, spec)


def clamp_step(step: Tensor) -> None:
    np.maximum(step.data, MIN_STEP, out=step.data)
