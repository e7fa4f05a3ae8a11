"""Per-step metric records streamed to CSV through a bounded queue."""

from __future__ import annotations

import csv
import math
import queue
import threading
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, List, Optional

HEADER = ("tick", "step", "module", "loss", "lambda", "lr", "wall_ms")


@dataclass(frozen=True)
class Record:
    tick: int
    step: int
    module: int
    loss: float
    lam: float
    lr: float
    wall_ms: float


def _fmt(r: Record):
    return (r.tick, r.step, r.module, repr(float(r.loss)), repr(float(r.lam)), repr(float(r.lr)),
            f"{r.wall_ms:.3f}")


class MetricsWriter:
    """Single consumer thread writing rows as they arrive.

    Producers call :meth:`emit` (blocking when the queue is full). Rows are
    flushed after every write. Use as a context manager or call :meth:`close`.
    """

    _STOP = object()

    def __init__(self, path, maxsize: int = 1024):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(HEADER)
        self._fh.flush()
        self._q: "queue.Queue" = queue.Queue(maxsize=maxsize)
        self._err: Optional[BaseException] = None
        self.count = 0
        self._thread = threading.Thread(target=self._run, name="metrics-writer", daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            item = self._q.get()
            if item is self._STOP:
                break
            try:
                self._csv.writerow(_fmt(item))
                self._fh.flush()
                self.count += 1
            except OSError as e:  # surfaced on close
                self._err = e
                break

    def emit(self, rec: Record) -> None:
        if self._err is not None:
            raise self._err
        self._q.put(rec)

    __call__ = emit

    def close(self) -> None:
        self._q.put(self._STOP)
        self._thread.join()
        self._fh.close()
        if self._err is not None:
            raise IOError(f"metrics write failed: {self._err}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MemoryMetrics:
    """Collects records in a list (tests, scripts)."""

    def __init__(self):
        self.records: List[Record] = []
        self._lock = threading.Lock()

    def emit(self, rec: Record) -> None:
        with self._lock:
            self.records.append(rec)

    __call__ = emit


def read_metrics(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("tick", "step", "module"):
            r[k] = int(r[k])
        for k in ("loss", "lambda", "lr", "wall_ms"):
            r[k] = float(r[k])
    return rows


def all_finite(rows: Iterable[dict]) -> bool:
    return all(math.isfinite(r["loss"]) for r in rows)
