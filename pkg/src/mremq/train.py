"""Full-precision fine-tuning, greedy REM, sequential MREM and the QAT baseline."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset
from .metrics import Record
from .model import MATMULS, Bits, Encoder, ModelConfig, QuantizedModel, embed, forward_fp, layer_forward
from .objectives import Schedule, mrem_step, rem_loss
from .optim import AdamW, TrainingError, linear_lr
from .partition import module_view, partition_layers

log = logging.getLogger(__name__)

Emit = Optional[Callable[[Record], None]]


@dataclass
class TrainConfig:
    steps: int = 2000  # T, optimizer steps per module
    lr: float = 1e-4
    batch_size: int = 32
    bits: Bits = field(default_factory=lambda: Bits(4, 4, 8))
    modules: int = 4
    t0: int = 4  # input-queue capacity (staleness bound)
    tf_fraction: float = 0.4  # teacher-forcing horizon T0 as a fraction of T
    teacher_forcing: bool = True
    rem_steps: int = 200  # per matmul
    qat_steps: int = 2000
    qat_lr: float = 1e-4
    calib_init: int = 256  # examples used to initialise activation step sizes
    pcq: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.modules, self.t0, self.rem_steps, self.qat_steps) <= 0:
            raise ValueError("step counts, batch size, modules and t0 must be positive")
        if not 0.0 <= self.tf_fraction <= 1.0:
            raise ValueError("tf_fraction must lie in [0, 1]")

    def schedule(self, teacher_forcing: Optional[bool] = None) -> Schedule:
        tf = self.teacher_forcing if teacher_forcing is None else teacher_forcing
        return Schedule.from_fraction(self.steps, self.tf_fraction if tf else 0.0, self.lr)


def init_quantized(fp: Encoder, calib_tokens: np.ndarray, cfg: TrainConfig) -> QuantizedModel:
    q = QuantizedModel.from_fp(fp, cfg.bits, cfg.pcq)
    q.calibrate(calib_tokens[: cfg.calib_init])
    return q


def _check(loss: float, where: str) -> float:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss in {where}")
    return loss


# ------------------------------------------------------------ full precision


def train_fp(model_cfg: ModelConfig, data: Dataset, steps: int = 1500, lr: float = 2e-3,
             batch_size: int = 64, seed: int = 0, weight_decay: float = 0.01,
             emit: Emit = None) -> Encoder:
    """Fine-tune a freshly initialised encoder on the labelled training split."""
    rng = np.random.default_rng(seed)
    model = Encoder.random(model_cfg, seed=seed, trainable=True)
    opt = AdamW(model.params, weight_decay=weight_decay)
    start = time.perf_counter()
    for t in range(steps):
        idx = rng.integers(0, data.num_train, batch_size)
        _, lg = forward_fp(model, data.train_tokens[idx])
        loss = ag.cross_entropy(lg, data.train_labels[idx])
        val = _check(float(loss.data), "train_fp")
        eta = linear_lr(t, steps, lr)
        opt.step(ag.backward(loss), eta)
        if emit:
            emit(Record(t + 1, t, 0, val, 0.0, eta, 1e3 * (time.perf_counter() - start)))
    return Encoder(model_cfg, model.arrays())


# ----------------------------------------------------------------------- REM


@dataclass(frozen=True)
class RemUnit:
    """One greedy REM unit: a matrix multiplication (or the embedding lookup)."""

    layer: int  # -1 for the embedding
    op: str
    weight: Optional[str]
    acts: tuple

    @property
    def sites(self) -> List[str]:
        out = [f"layer{self.layer}/act/{a}" for a in self.acts]
        if self.weight:
            out.append(self.weight)
        return out


def rem_units(model_cfg: ModelConfig) -> List[RemUnit]:
    units = [RemUnit(-1, "embed", "embed/tok", ())]
    for l in range(model_cfg.layers):
        for op, w, acts in MATMULS:
            units.append(RemUnit(l, op, f"layer{l}/{w}" if w else None, acts))
    return units


def _record(q: QuantizedModel, l: int, X: np.ndarray, names, batch: int = 512) -> Dict[str, np.ndarray]:
    q.recording = {n: [] for n in names}
    try:
        with ag.no_grad():
            for i in range(0, len(X), batch):
                layer_forward(q, l, X[i:i + batch])
        return {n: np.concatenate(v) for n, v in q.recording.items()}
    finally:
        q.recording = None


def _rem_pair(q: QuantizedModel, fp: Encoder, unit: RemUnit, ops: List[np.ndarray], dh: int):
    """Quantized prediction and full-precision target of one unit on a batch."""
    l = unit.layer
    if unit.op == "embed":
        tok = ops[0]
        return ag.embedding(q.weight("embed/tok"), tok), fp.params["embed/tok"].data[tok]
    names = [f"layer{l}/act/{a}" for a in unit.acts]
    if unit.weight:
        (a,) = ops
        pred = ag.matmul(q.act(names[0], Tensor(a)), q.weight(unit.weight))
        return pred, a @ fp.params[unit.weight].data
    x, y = ops
    xq, yq = q.act(names[0], Tensor(x)), q.act(names[1], Tensor(y))
    if unit.op == "qk":
        pred = ag.scale(ag.matmul(xq, ag.transpose(yq, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        return pred, (x @ np.swapaxes(y, -1, -2)) * (1.0 / math.sqrt(dh))
    return ag.matmul(xq, yq), x @ y


def train_rem(fp: Encoder, calib_tokens: np.ndarray, cfg: TrainConfig, emit: Emit = None,
              visit: Optional[Callable[[RemUnit], None]] = None) -> QuantizedModel:
    """Greedy per-matmul reconstruction in forward order.

    Each unit trains only its own latent weight and the step sizes not yet
    fixed by an earlier unit, for ``cfg.rem_steps`` steps, on operands produced
    by the already-quantized prefix. Operands are cached per unit.
    """
    rng = np.random.default_rng(cfg.seed)
    q = init_quantized(fp, calib_tokens, cfg)
    for t in q.trainable().values():
        t.requires_grad = False
    trained = set()
    M = len(calib_tokens)
    dh = fp.cfg.head_dim
    X = None
    tick = 0
    start = time.perf_counter()
    for ui, unit in enumerate(rem_units(fp.cfg)):
        if visit:
            visit(unit)
        if unit.op == "embed":
            ops_all = [calib_tokens]
        else:
            if X is None:
                X = _embed_all(q, calib_tokens)
            names = [f"layer{unit.layer}/act/{a}" for a in unit.acts]
            rec = _record(q, unit.layer, X, names)
            ops_all = [rec[n] for n in names]
        params = {}
        for site in unit.sites:
            if site in trained:
                continue
            trained.add(site)
            if site == unit.weight:
                params[site] = q.params[site]
            spec = q.sites[site]
            if spec is not None and spec.step is not None and spec.learnable:
                params["qspec/" + site] = spec.step
        for p in params.values():
            p.requires_grad = True
        opt = AdamW(params)
        for t in range(cfg.rem_steps if params else 0):
            idx = rng.integers(0, M, cfg.batch_size)
            pred, target = _rem_pair(q, fp, unit, [o[idx] for o in ops_all], dh)
            loss = rem_loss(pred, target)
            val = _check(float(loss.data), f"REM unit {ui}")
            eta = linear_lr(t, cfg.rem_steps, cfg.lr)
            opt.step(ag.backward(loss), eta)
            tick += 1
            if emit:
                emit(Record(tick, t, ui, val, 0.0, eta, 1e3 * (time.perf_counter() - start)))
        for p in params.values():
            p.requires_grad = False
        if unit.op == "w2":
            X = _layer_all(q, unit.layer, X)
    for t in q.trainable().values():
        t.requires_grad = True
    for k, t in q.step_tensors().items():
        t.requires_grad = q.sites[k[len("qspec/"):]].learnable
    return q


def _embed_all(model, tokens, batch=512) -> np.ndarray:
    with ag.no_grad():
        return np.concatenate([embed(model, tokens[i:i + batch]).data for i in range(0, len(tokens), batch)])


def _layer_all(model, l, X, batch=512) -> np.ndarray:
    with ag.no_grad():
        return np.concatenate([layer_forward(model, l, X[i:i + batch]).data for i in range(0, len(X), batch)])


# -------------------------------------------------------------------- MREM-S


def train_mrem_s(fp: Encoder, calib_tokens: np.ndarray, cfg: TrainConfig, emit: Emit = None,
                 after_module: Optional[Callable[[int, QuantizedModel], None]] = None) -> QuantizedModel:
    """Train modules one after another; module n sees cached outputs of the
    trained quantized prefix (and of the full-precision prefix)."""
    rng = np.random.default_rng(cfg.seed)
    q = init_quantized(fp, calib_tokens, cfg)
    part = partition_layers(fp.cfg.layers, cfg.modules)
    sched = cfg.schedule()
    tf = sched.T0 > 0
    F = Fh = calib_tokens
    M = len(calib_tokens)
    tick = 0
    start = time.perf_counter()
    for n in range(1, part.num_modules + 1):
        fv, qv = module_view(fp, part, n), module_view(q, part, n)
        opt = AdamW(qv.trainable)
        for t in range(cfg.steps):
            idx = rng.integers(0, M, cfg.batch_size)
            res = mrem_step(fv, qv, F[idx], Fh[idx], t, sched, opt, tf)
            tick += 1
            if emit:
                emit(Record(tick, t, n, res.loss, res.lam, res.lr, 1e3 * (time.perf_counter() - start)))
        if after_module:
            after_module(n, q)
        if n < part.num_modules:
            F, Fh = fv.boundary(F), qv.boundary(Fh)
    return q


# ----------------------------------------------------------------------- QAT


def train_qat(fp: Encoder, train_tokens: np.ndarray, cfg: TrainConfig, emit: Emit = None) -> QuantizedModel:
    """End-to-end training of every latent weight and step size, matching the
    full-precision logits. Uses whatever set it is given (normally the full
    training split)."""
    rng = np.random.default_rng(cfg.seed)
    q = init_quantized(fp, train_tokens, cfg)
    opt = AdamW(q.trainable())
    start = time.perf_counter()
    for t in range(cfg.qat_steps):
        idx = rng.integers(0, len(train_tokens), cfg.batch_size)
        tok = train_tokens[idx]
        with ag.no_grad():
            target = forward_fp(fp, tok)[1].data
        loss = ag.mse(forward_fp(q, tok)[1], target)
        val = _check(float(loss.data), "QAT")
        eta = linear_lr(t, cfg.qat_steps, cfg.qat_lr)
        opt.step(ag.backward(loss), eta)
        if emit:
            emit(Record(t + 1, t, 0, val, 0.0, eta, 1e3 * (time.perf_counter() - start)))
    return q


def equal_budget_rem_steps(model_cfg: ModelConfig, cfg: TrainConfig) -> int:
    """REM steps per unit so that REM's total equals MREM-S's ``N * T``."""
    return max(1, (cfg.modules * cfg.steps) // len(rem_units(model_cfg)))
