"""Synthetic majority task and calibration sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    train_tokens: np.ndarray
    train_labels: np.ndarray
    held_tokens: np.ndarray
    held_labels: np.ndarray
    vocab: int

    @property
    def num_train(self) -> int:
        return len(self.train_tokens)


@dataclass
class CalibrationSet:
    """Label-free subset of the training split."""

    tokens: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def majority_labels(tokens: np.ndarray, vocab: int) -> np.ndarray:
    """1 iff strictly more than half the tokens fall in the lower half of the vocabulary."""
    tokens = np.asarray(tokens)
    low = (tokens < vocab // 2).sum(axis=1)
    return (2 * low > tokens.shape[1]).astype(np.int64)


def gen_synthetic_task(vocab: int = 64, seq_len: int = 16, num_train: int = 8192,
                       num_held: int = 2048, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    tok = rng.integers(0, vocab, size=(num_train + num_held, seq_len), dtype=np.int64)
    lab = majority_labels(tok, vocab)
    return Dataset(tok[:num_train], lab[:num_train], tok[num_train:], lab[num_train:], vocab)


def sample_calibration(ds: Dataset, size: int = 4096, seed: int = 0) -> CalibrationSet:
    """Uniform sample of the training split without replacement; labels dropped."""
    if not 0 < size <= ds.num_train:
        raise ValueError(f"calibration size {size} not in 1..{ds.num_train}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(ds.num_train, size=size, replace=False))
    return CalibrationSet(ds.train_tokens[idx], idx)
