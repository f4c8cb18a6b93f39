"""The parallel particle loop.

Memory-state contract for everything the loop touches:

==================  ====================================================
shared, read-only   grid, FlowStore (face flows, porosity, sink classes),
                    the particle ``order`` array, loop configuration
per worker          TrackingEngine (record buffer, claim cursor, stats),
                    observer / output unit
copied in           t_max, weak-sink policy, record flags, time index
reduced (sum)       processed, completed, records, weak-sink passes,
                    cell initialisations
by index            particle state arrays: each index is claimed by
                    exactly one worker, so rows are never shared
==================  ====================================================

The only cross-worker synchronisation is the atomic claim counter (dynamic
schedule), the critical-section lock of the single-file output protocol, and
the final join.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .tracking import (
    ST_CELL_INITS, ST_COMPLETED, ST_PROCESSED, ST_RECORDS, ST_WEAK_PASSES,
    ParticleArrays, RecordMode,
)

logger = logging.getLogger(__name__)

SCHEDULES = ("static_balanced", "dynamic")


class ParticleLoopError(RuntimeError):
    def __init__(self, message, worker_id=None):
        super().__init__(message)
        self.worker_id = worker_id


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "dynamic"
    chunk: int = 1

    def __post_init__(self):
        kind = {"static": "static_balanced"}.get(self.kind, self.kind)
        if kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; choose from {SCHEDULES}")
        object.__setattr__(self, "kind", kind)
        if int(self.chunk) < 1:
            raise ValueError(f"chunk must be >= 1, got {self.chunk}")


@dataclass(frozen=True)
class LoopTarget:
    """Per-dispatch values copied into every worker."""

    t_max: float
    record_mode: RecordMode = RecordMode.ENDPOINT
    record_at_limit: bool = False
    stop_at_limit: bool = False
    time_index: int = 0


@dataclass
class LoopStats:
    per_worker: list[int] = field(default_factory=list)
    particles_completed: int = 0
    records_written: int = 0
    weak_sink_passes: int = 0
    cell_initializations: int = 0
    wall_time: float = 0.0

    @property
    def particles_processed(self) -> int:
        return sum(self.per_worker)

    def __iadd__(self, other: "LoopStats"):
        if len(self.per_worker) < len(other.per_worker):
            self.per_worker += [0] * (len(other.per_worker) - len(self.per_worker))
        for w, c in enumerate(other.per_worker):
            self.per_worker[w] += c
        self.particles_completed += other.particles_completed
        self.records_written += other.records_written
        self.weak_sink_passes += other.weak_sink_passes
        self.cell_initializations += other.cell_initializations
        self.wall_time += other.wall_time
        return self

    def counters(self) -> dict[str, int]:
        return {
            "particles_processed": self.particles_processed,
            "particles_completed": self.particles_completed,
            "records_written": self.records_written,
            "weak_sink_passes": self.weak_sink_passes,
            "cell_initializations": self.cell_initializations,
        }


def static_partition(n_particles: int, n_workers: int) -> list[range]:
    """Contiguous ranges covering ``[0, n)`` whose sizes differ by at most one."""
    if n_workers < 1:
        raise ValueError(f"n_workers must be >= 1, got {n_workers}")
    base, extra = divmod(int(n_particles), n_workers)
    out, start = [], 0
    for w in range(n_workers):
        size = base + (1 if w < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


def available_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def effective_workers(requested: int, oversubscribe: bool = False) -> int:
    if requested < 1:
        raise ValueError(f"worker count must be >= 1, got {requested}")
    cap = available_workers()
    if requested > cap and not oversubscribe:
        logger.warning("capping %d workers to %d available cores", requested, cap)
        return cap
    return requested


def run_particle_loop(particles: ParticleArrays, n_workers: int, schedule: ScheduleSpec,
                      engine_factory, observer_factory, t_max, order=None) -> LoopStats:
    """Displace every particle listed in ``order`` up to ``t_max``.

    ``engine_factory(w)`` returns worker ``w``'s TrackingEngine and
    ``observer_factory(w)`` its record sink (an object with
    ``write_block(rows)``, or ``None`` when nothing is recorded). ``t_max`` is
    a float or a :class:`LoopTarget`. Worker 0 runs in the calling thread, so
    a single worker never touches the thread pool.
    """
    target = t_max if isinstance(t_max, LoopTarget) else LoopTarget(float(t_max))
    if n_workers < 1:
        raise ValueError(f"n_workers must be >= 1, got {n_workers}")
    if order is None:
        order = np.arange(len(particles), dtype=np.int64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    n = order.size
    engines = [engine_factory(w) for w in range(n_workers)]
    observers = [observer_factory(w) if observer_factory else None for w in range(n_workers)]
    before = [e.stats.copy() for e in engines]

    if schedule.kind == "static_balanced":
        ranges = static_partition(n, n_workers)
        counters = np.array([r.start for r in ranges], dtype=np.int64)
        plan = [(w, max(len(r), 1), r.stop) for w, r in enumerate(ranges)]
    else:
        counters = np.zeros(1, dtype=np.int64)
        plan = [(0, int(schedule.chunk), n)] * n_workers

    abort = threading.Event()

    def work(w):
        engine, observer = engines[w], observers[w]
        slot, chunk, limit = plan[w]
        engine.reset_cursor()
        try:
            while not abort.is_set():
                nrec, done = engine.run(particles, order, counters, slot, chunk, limit, target.t_max,
                                        target.record_mode, target.record_at_limit,
                                        target.stop_at_limit, target.time_index)
                if nrec:
                    observer.write_block(engine.buffer[:nrec])
                if done:
                    return
        except BaseException:
            abort.set()
            raise

    t0 = time.perf_counter()
    errors = []
    if n_workers == 1:
        try:
            work(0)
        except Exception as exc:
            errors.append((0, exc))
    else:
        with ThreadPoolExecutor(max_workers=n_workers - 1, thread_name_prefix="ptrack-worker") as pool:
            futures = [pool.submit(work, w) for w in range(1, n_workers)]
            try:
                work(0)
            except Exception as exc:
                errors.append((0, exc))
            for w, fut in enumerate(futures, start=1):
                exc = fut.exception()
                if exc is not None:
                    errors.append((w, exc))
    wall = time.perf_counter() - t0
    if errors:
        w, exc = errors[0]
        raise ParticleLoopError(f"worker {w} failed: {exc}", w) from exc

    delta = [e.stats - b for e, b in zip(engines, before)]
    return LoopStats(
        per_worker=[int(d[ST_PROCESSED]) for d in delta],
        particles_completed=int(sum(d[ST_COMPLETED] for d in delta)),
        records_written=int(sum(d[ST_RECORDS] for d in delta)),
        weak_sink_passes=int(sum(d[ST_WEAK_PASSES] for d in delta)),
        cell_initializations=int(sum(d[ST_CELL_INITS] for d in delta)),
        wall_time=wall,
    )
