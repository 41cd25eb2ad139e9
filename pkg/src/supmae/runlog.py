"""Line-delimited JSON run logs with line-atomic appends."""
from __future__ import annotations

import errno
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

RECORD_FIELDS = ("mode", "epoch", "step", "lr", "loss_joint", "loss_rec", "loss_cls", "accuracy")
TIMING_FIELDS = ("epoch", "step", "timestamp", "samples_per_sec")


class DiskFull(OSError):
    pass


def _clean(v):
    # json has no NaN; absent values are written as null
    if isinstance(v, float) and v != v:
        return None
    return v


class LineSink:
    """Append-only file where each record is one ``os.write`` on an O_APPEND fd.

    A lock serializes writers inside the process; O_APPEND keeps lines whole
    across processes. On ENOSPC the write is retried with exponential backoff
    before :class:`DiskFull` is raised.
    """

    def __init__(self, path, retries: int = 5, backoff: float = 0.05, writer: Callable[[int, bytes], int] = os.write,
                 sleep: Callable[[float], None] = time.sleep):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        self._lock = threading.Lock()
        self.retries, self.backoff = retries, backoff
        self._write, self._sleep = writer, sleep

    def write(self, record: dict) -> None:
        line = (json.dumps({k: _clean(v) for k, v in record.items()}, sort_keys=True) + "\n").encode()
        with self._lock:
            for attempt in range(self.retries + 1):
                try:
                    n = self._write(self._fd, line)
                    if n != len(line):
                        raise OSError(errno.EIO, f"short write to {self.path}")
                    return
                except OSError as exc:
                    if exc.errno != errno.ENOSPC:
                        raise
                    if attempt == self.retries:
                        raise DiskFull(errno.ENOSPC, f"{self.path}: disk full after {self.retries} retries") from None
                    wait = self.backoff * 2 ** attempt
                    log.warning("disk full writing %s; retrying in %.2fs", self.path, wait)
                    self._sleep(wait)

    def flush(self) -> None:
        with self._lock:
            os.fsync(self._fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RunLog:
    """Metrics go to ``run.log`` and wall-clock fields to ``timing.log``.

    Keeping time out of ``run.log`` makes fixed-seed reruns produce
    byte-identical metric logs.
    """

    def __init__(self, out_dir, fingerprint: str, **sink_kw):
        out_dir = Path(out_dir)
        self.metrics = LineSink(out_dir / "run.log", **sink_kw)
        self.timing = LineSink(out_dir / "timing.log", **sink_kw)
        self.fingerprint = fingerprint
        self._last: tuple[int, int] | None = None

    def config(self, mode: str, canonical: str) -> None:
        self.metrics.write({"kind": "config", "mode": mode, "fingerprint": self.fingerprint, "config": canonical})

    def record(self, mode: str, epoch: int, step: int, lr: float, loss_joint: float, loss_rec: float,
               loss_cls: float, accuracy: float | None = None, samples_per_sec: float | None = None,
               timestamp: float | None = None) -> None:
        key = (epoch, step)
        if self._last is not None and key < self._last:
            raise ValueError(f"run log must be monotone in (epoch, step): {key} after {self._last}")
        self._last = key
        self.metrics.write({"kind": "metrics", "mode": mode, "epoch": epoch, "step": step, "lr": lr,
                            "loss_joint": loss_joint, "loss_rec": loss_rec, "loss_cls": loss_cls,
                            "accuracy": accuracy, "fingerprint": self.fingerprint})
        self.timing.write({"epoch": epoch, "step": step, "timestamp": time.time() if timestamp is None else timestamp,
                           "samples_per_sec": samples_per_sec})

    def event(self, kind: str, **fields) -> None:
        self.metrics.write({"kind": kind, "fingerprint": self.fingerprint, **fields})

    def flush(self) -> None:
        self.metrics.flush()
        self.timing.flush()

    def close(self) -> None:
        self.metrics.close()
        self.timing.close()


def read(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def metric_rows(path) -> list[dict]:
    return [r for r in read(path) if r.get("kind") == "metrics"]
