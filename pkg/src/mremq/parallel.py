"""Parallel module-wise training with bounded-staleness boundary queues.

Every boundary between module n and n+1 holds one FIFO of paired entries
``(f, fhat, batch_id, stamp)``. In lockstep mode all workers advance one step
per global tick and read the queue state left by the previous tick, which
makes a run bit-reproducible. In threads mode each worker is a thread and
queue access is serialized by a lock.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .metrics import Record
from .model import Encoder, QuantizedModel
from .objectives import mrem_step
from .optim import AdamW
from .partition import ModuleView, module_view, partition_layers
from .train import Emit, TrainConfig, init_quantized

log = logging.getLogger(__name__)

LOCKSTEP = "lockstep"
THREADS = "threads"


class QueueEmptyError(RuntimeError):
    """Sampling from a boundary queue that warm-up never filled."""


@dataclass(frozen=True)
class Entry:
    f: np.ndarray
    fhat: np.ndarray
    batch_id: int
    stamp: int


class BoundaryQueue:
    """Bounded FIFO of paired boundary tensors; the oldest entry is evicted on overflow."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self.pushes = 0

    def push(self, entry: Entry) -> None:
        if entry.f.shape != entry.fhat.shape:
            raise ValueError(f"paired tensors differ in shape: {entry.f.shape} vs {entry.fhat.shape}")
        with self._lock:
            if self._items and self._items[-1].f.shape[1:] != entry.f.shape[1:]:
                raise ValueError("entry shape inconsistent with this boundary")
            self._items.append(entry)
            self.pushes += 1

    def snapshot(self) -> Tuple[Entry, ...]:
        with self._lock:
            return tuple(self._items)

    def sample(self, rng: np.random.Generator) -> Entry:
        with self._lock:
            if not self._items:
                raise QueueEmptyError("sample from an empty boundary queue (warm-up not run?)")
            return self._items[int(rng.integers(len(self._items)))]

    def stamps(self) -> List[int]:
        return [e.stamp for e in self.snapshot()]

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


def sample_snapshot(snap: Tuple[Entry, ...], rng: np.random.Generator) -> Entry:
    if not snap:
        raise QueueEmptyError("sample from an empty boundary queue (warm-up not run?)")
    return snap[int(rng.integers(len(snap)))]


class BatchSource:
    """Fresh calibration batches for the first worker, each with a new id."""

    def __init__(self, tokens: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.tokens = tokens
        self.batch_size = batch_size
        self.rng = rng
        self.next_id = 0

    def draw(self) -> Tuple[np.ndarray, int]:
        idx = self.rng.integers(0, len(self.tokens), self.batch_size)
        bid = self.next_id
        self.next_id += 1
        return self.tokens[idx], bid


def warmup_fill(fp_views: List[ModuleView], q_views: List[ModuleView], source: BatchSource,
                t0: int) -> Tuple[List[BoundaryQueue], int]:
    """``t0`` sequential forward passes through all modules; returns the
    filled boundary queues and the number of module forwards performed."""
    if t0 < 1:
        raise ValueError("t0 must be >= 1")
    N = len(q_views)
    queues = [BoundaryQueue(t0) for _ in range(N - 1)]
    forwards = 0
    for k in range(1, t0 + 1):
        tok, bid = source.draw()
        f, fhat = tok, tok
        for n in range(N):
            f = fp_views[n].boundary(f)
            fhat = q_views[n].boundary(fhat)
            forwards += 1
            if n < N - 1:
                queues[n].push(Entry(f, fhat, bid, k))
    return queues, forwards


@dataclass
class WorkerReport:
    module: int
    ticks: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    lams: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)

    def add(self, rec: Record) -> None:
        if self.ticks and rec.tick <= self.ticks[-1]:
            raise RuntimeError(f"worker {self.module}: tick {rec.tick} not increasing")
        self.ticks.append(rec.tick)
        self.losses.append(rec.loss)
        self.lams.append(rec.lam)
        self.lrs.append(rec.lr)
        self.wall_ms.append(rec.wall_ms)


@dataclass
class MremPResult:
    model: QuantizedModel
    reports: List[WorkerReport]
    queues: List[BoundaryQueue]
    warmup_forwards: int
    ticks: int


# Called as observer(tick, n, consumed_entry_or_None, queues) after each worker step.
Observer = Optional[Callable[[int, int, Optional[Entry], List[BoundaryQueue]], None]]


class _Worker:
    def __init__(self, n: int, fv: ModuleView, qv: ModuleView, cfg: TrainConfig):
        self.n = n
        self.fv, self.qv = fv, qv
        self.opt = AdamW(qv.trainable)
        self.rng = np.random.default_rng([cfg.seed, n])
        self.report = WorkerReport(n)

    def step(self, t, sched, tf, inp: Tuple[np.ndarray, np.ndarray]):
        return mrem_step(self.fv, self.qv, inp[0], inp[1], t, sched, self.opt, tf)


def train_mrem_p(fp: Encoder, calib_tokens: np.ndarray, cfg: TrainConfig, mode: str = LOCKSTEP,
                 emit: Emit = None, observer: Observer = None) -> MremPResult:
    """All modules trained concurrently from bounded-staleness boundary queues."""
    if mode not in (LOCKSTEP, THREADS):
        raise ValueError(f"unknown mode {mode!r}")
    q = init_quantized(fp, calib_tokens, cfg)
    part = partition_layers(fp.cfg.layers, cfg.modules)
    N = part.num_modules
    sched = cfg.schedule()
    tf = sched.T0 > 0
    fvs = [module_view(fp, part, n) for n in range(1, N + 1)]
    qvs = [module_view(q, part, n) for n in range(1, N + 1)]
    workers = [_Worker(n, fvs[n - 1], qvs[n - 1], cfg) for n in range(1, N + 1)]
    source = BatchSource(calib_tokens, cfg.batch_size, workers[0].rng)
    if N == 1:
        queues, fwd = [], 0
    else:
        queues, fwd = warmup_fill(fvs, qvs, source, cfg.t0)
    base = cfg.t0 if N > 1 else 0
    start = time.perf_counter()

    def record(w: _Worker, tick, t, res):
        rec = Record(tick, t, w.n, res.loss, res.lam, res.lr, 1e3 * (time.perf_counter() - start))
        w.report.add(rec)
        if emit:
            emit(rec)

    if mode == LOCKSTEP:
        for t in range(cfg.steps):
            stamp = base + t + 1
            snaps = [qq.snapshot() for qq in queues]
            outs = []
            for w in workers:
                if w.n == 1:
                    tok, bid = source.draw()
                    entry = None
                    inp = (tok, tok)
                else:
                    entry = sample_snapshot(snaps[w.n - 2], w.rng)
                    bid = entry.batch_id
                    inp = (entry.f, entry.fhat)
                res = w.step(t, sched, tf, inp)
                record(w, stamp, t, res)
                outs.append(Entry(res.f_out, res.fhat_out, bid, stamp))
                if observer:
                    observer(stamp, w.n, entry, queues)
            for qq, e in zip(queues, outs):
                qq.push(e)
    else:
        _run_threads(workers, queues, source, cfg, sched, tf, base, record, observer)
    return MremPResult(q, [w.report for w in workers], queues, fwd, speedup_ticks(N, cfg.steps, cfg.t0)[0])


def _run_threads(workers, queues, source, cfg, sched, tf, base, record, observer):
    abort = threading.Event()
    errors: List[BaseException] = []
    err_lock = threading.Lock()

    def body(w: _Worker):
        try:
            for t in range(cfg.steps):
                if abort.is_set():
                    return
                stamp = base + t + 1
                if w.n == 1:
                    tok, bid = source.draw()
                    entry, inp = None, (tok, tok)
                else:
                    entry = queues[w.n - 2].sample(w.rng)
                    bid, inp = entry.batch_id, (entry.f, entry.fhat)
                res = w.step(t, sched, tf, inp)
                record(w, stamp, t, res)
                if w.n - 1 < len(queues):
                    queues[w.n - 1].push(Entry(res.f_out, res.fhat_out, bid, stamp))
                if observer:
                    observer(stamp, w.n, entry, queues)
        except BaseException as e:  # noqa: BLE001 - re-raised by the caller
            with err_lock:
                errors.append(e)
            abort.set()

    threads = [threading.Thread(target=body, args=(w,), name=f"mremp-worker-{w.n}") for w in workers]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]


# --------------------------------------------------------------- accounting


def gpipe_bubble(N: int, M: int) -> Fraction:
    """Idle fraction of a synchronous pipeline with ``N`` stages and ``M`` micro-batches."""
    if N < 1 or M < 1:
        raise ValueError("N and M must be >= 1")
    return Fraction(N - 1, N + M - 1)


def speedup_ticks(N: int, T: int, t0: int, M: int = 1) -> Tuple[int, int, Fraction]:
    """(MREM-P ticks, sequential ticks, GPipe ticks); one module-step is one tick."""
    if min(N, T, t0, M) < 1:
        raise ValueError("N, T, t0 and M must be >= 1")
    par = T if N == 1 else T + N * t0
    seq = N * T
    gpipe = Fraction(seq) / (1 - gpipe_bubble(N, M))
    return par, seq, gpipe


@dataclass(frozen=True)
class SpeedupReport:
    N: int
    T: int
    t0: int
    M: int
    mrem_p_ticks: int
    sequential_ticks: int
    gpipe_ticks: Fraction
    bubble: Fraction

    @property
    def speedup(self) -> float:
        return self.sequential_ticks / self.mrem_p_ticks

    @property
    def gpipe_speedup(self) -> float:
        return self.sequential_ticks / float(self.gpipe_ticks)

    def rows(self) -> List[Tuple[str, str, str]]:
        def num(x):
            return str(x) if isinstance(x, int) or x.denominator == 1 else f"{float(x):.2f}"

        return [
            ("mrem-p", num(self.mrem_p_ticks), f"{self.speedup:.2f}"),
            ("sequential", num(self.sequential_ticks), "1.00"),
            ("gpipe", num(self.gpipe_ticks), f"{self.gpipe_speedup:.2f}"),
        ]

    def table(self) -> str:
        head = (f"N={self.N} T={self.T} t0={self.t0} M={self.M} "
                f"gpipe_bubble={self.bubble} ({float(self.bubble):.4f})")
        lines = [head, f"{'schedule':<12}{'ticks':>10}{'speedup':>10}"]
        lines += [f"{a:<12}{b:>10}{c:>10}" for a, b, c in self.rows()]
        return "\n".join(lines)

    def csv(self) -> str:
        out = ["schedule,ticks,speedup_vs_sequential"]
        out += [",".join(r) for r in self.rows()]
        return "\n".join(out) + "\n"


def simulate_speedup(N: int = 4, T: int = 2000, t0: int = 4, M: int = 4) -> SpeedupReport:
    par, seq, gp = speedup_ticks(N, T, t0, M)
    return SpeedupReport(N, T, t0, M, par, seq, gp, gpipe_bubble(N, M))
