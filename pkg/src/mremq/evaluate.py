"""Accuracy and reconstruction-error measurements."""

from __future__ import annotations

from typing import List

import numpy as np

from . import autograd as ag
from .model import Encoder, forward_fp, logits


def accuracy(model: Encoder, tokens, labels) -> float:
    return float((logits(model, tokens).argmax(axis=1) == np.asarray(labels)).mean())


def logit_mse(fp: Encoder, q: Encoder, tokens) -> float:
    d = logits(q, tokens).astype(np.float64) - logits(fp, tokens)
    return float((d * d).mean())


def layer_errors(fp: Encoder, q: Encoder, tokens, batch: int = 512) -> List[float]:
    """MSE between quantized and full-precision ``f_l`` for l = 0..L, then the logits."""
    sums = None
    counts = None
    with ag.no_grad():
        for i in range(0, len(tokens), batch):
            t = tokens[i:i + batch]
            hf, lf = forward_fp(fp, t)
            hq, lq = forward_fp(q, t)
            pairs = list(zip(hq + [lq], hf + [lf]))
            s = [float(((a.data.astype(np.float64) - b.data) ** 2).sum()) for a, b in pairs]
            c = [a.data.size for a, _ in pairs]
            sums = s if sums is None else [x + y for x, y in zip(sums, s)]
            counts = c if counts is None else [x + y for x, y in zip(counts, c)]
    return [s / c for s, c in zip(sums, counts)]


def total_reconstruction_loss(fp: Encoder, q: Encoder, tokens) -> float:
    """Whole-model reconstruction loss: sum over f_0..f_L and the logits of each MSE."""
    return float(sum(layer_errors(fp, q, tokens)))
