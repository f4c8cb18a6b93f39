"""Simulation driver: time-step loop, tracking loop and particle-loop dispatch.

::

    T_stop = determine_stop_time(config, store)
    for each flow snapshot p (ends at ts_max):        # serial flow-array update
        while True:
            t_max = min(next output time, ts_max, T_stop)
            run_particle_loop(live + newly released particles, t_max)   # parallel
            if t_max is an output time: end the output step (flush/consolidate)
            if t_max == T_stop: done
            if t_max == ts_max: next snapshot

``elapsed`` in the returned summary covers that whole loop, including
timeseries/pathline writing, but not particle placement or the endpoint file.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .flow import FlowStore
from .grid import Grid, locate_many
from .output import (
    PATH_DTYPE, TS_DTYPE, config_digest, normalize_protocol, open_protocol, write_endpoint_file,
)
from .scheduler import LoopStats, LoopTarget, ScheduleSpec, effective_workers, run_particle_loop
from .tracking import ParticleArrays, RecordMode, Status, TrackingEngine, WeakSinkPolicy

logger = logging.getLogger(__name__)

MODES = ("endpoint", "timeseries", "pathline")
PARTIAL_MARKER = "PARTIAL_OUTPUT"


class ConfigError(ValueError):
    pass


# -- release plans ---------------------------------------------------------------


@dataclass(frozen=True)
class LineRegion:
    """Segment parallel to y at fixed ``x`` and ``z``; particles at cell-centred spacing."""

    x: float
    y_min: float
    y_max: float
    z: float


@dataclass(frozen=True)
class FaceRegion:
    """Horizontal rectangle at elevation ``z``; particles on a cell-centred sub-grid."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z: float


@dataclass(frozen=True)
class ReleaseStage:
    time: float
    count: int
    region: LineRegion | FaceRegion
    group: int = 0

    def __post_init__(self):
        if self.time < 0:
            raise ConfigError(f"release time must be >= 0, got {self.time}")
        if self.count < 0:
            raise ConfigError(f"release count must be >= 0, got {self.count}")


def _stage_points(stage: ReleaseStage) -> np.ndarray:
    r, n = stage.region, stage.count
    if n == 0:
        return np.empty((0, 3))
    if isinstance(r, LineRegion):
        if r.y_max < r.y_min:
            raise ConfigError("line region has y_max < y_min")
        if n > 1 and r.y_max == r.y_min:
            raise ConfigError(f"zero-length release line cannot hold {n} particles")
        y = r.y_min + (np.arange(n) + 0.5) * ((r.y_max - r.y_min) / n)
        return np.column_stack([np.full(n, r.x), y, np.full(n, r.z)])
    if isinstance(r, FaceRegion):
        w, h = r.x_max - r.x_min, r.y_max - r.y_min
        if w < 0 or h < 0:
            raise ConfigError("face region has negative extent")
        if n > 1 and (w == 0 or h == 0):
            raise ConfigError(f"zero-area release face cannot hold {n} particles")
        ncol = max(1, math.ceil(math.sqrt(n)))
        nrow = max(1, math.ceil(n / ncol))
        m = np.arange(n)
        x = r.x_min + (m % ncol + 0.5) * (w / ncol)
        y = r.y_min + (m // ncol + 0.5) * (h / nrow)
        return np.column_stack([x, y, np.full(n, r.z)])
    raise ConfigError(f"unknown release region {r!r}")


def release_particles(plan, grid: Grid, mode: str = "endpoint") -> ParticleArrays:
    """Place particles; ids follow placement order (stage by stage)."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    plan = list(plan)
    points = [_stage_points(stage) for stage in plan]
    counts = [len(p) for p in points]
    cells, local = locate_many(grid, np.concatenate(points) if points else np.empty((0, 3)))
    rel = np.repeat([float(s.time) for s in plan], counts)
    groups = np.repeat([int(s.group) for s in plan], counts)
    n = cells.size
    return ParticleArrays(grid, np.arange(n), groups, cells, local, rel)


# -- configuration ---------------------------------------------------------------


@dataclass
class SimulationConfig:
    mode: str = "endpoint"
    t_stop: float | None = None  # None: until termination (endpoint/pathline) or last output time
    ts_times: tuple | None = None
    ts_interval: float | None = None
    ts_count: int | None = None
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    workers: int = 1
    weak_sink_policy: WeakSinkPolicy = WeakSinkPolicy.PASS_THROUGH
    protocol: str = "parallel_exclusive"
    release: list = field(default_factory=list)
    seed: int = 0
    out_dir: str | None = None
    oversubscribe: bool = False
    record_capacity: int = 8192
    write_endpoints: bool = True
    tag: dict = field(default_factory=dict)  # physics description folded into the digest

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if int(self.workers) < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        self.protocol = normalize_protocol(self.protocol)
        if self.mode == "pathline" and self.protocol != "parallel_exclusive":
            raise ConfigError("pathline mode supports only the parallel_exclusive protocol")
        self.weak_sink_policy = WeakSinkPolicy(self.weak_sink_policy)
        if self.t_stop is not None and self.t_stop < 0:
            raise ConfigError(f"t_stop must be >= 0, got {self.t_stop}")
        if self.ts_count is not None and self.ts_count < 1:
            raise ConfigError(f"ts_count must be >= 1, got {self.ts_count}")
        if self.ts_interval is not None and not self.ts_interval > 0:
            raise ConfigError(f"ts_interval must be positive, got {self.ts_interval}")

    def digest(self) -> str:
        """Digest of the physics only (not workers, schedule or protocol)."""
        items = dict(self.tag)
        items.update(mode=self.mode, t_stop=self.t_stop, weak=int(self.weak_sink_policy),
                     times=tuple(output_times(self)) if self.mode == "timeseries" else (),
                     release=tuple(self.release))
        return config_digest(items)


_CONFIG_KEYS = {f.name for f in fields(SimulationConfig)} - {"release", "tag", "schedule"}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def output_times(config: SimulationConfig) -> list[float]:
    """Output times: the explicit list, else ``k * T / count`` or ``k * interval``."""
    if config.ts_times is not None:
        times = [float(t) for t in config.ts_times]
    elif config.ts_count is not None and config.ts_interval is None:
        if config.t_stop is None:
            raise ConfigError("ts_count without ts_interval needs t_stop (the timeseries horizon)")
        times = [k * config.t_stop / config.ts_count for k in range(1, config.ts_count + 1)]
        times[-1] = float(config.t_stop)
    elif config.ts_interval is not None:
        if config.ts_count is not None:
            times = [k * config.ts_interval for k in range(1, config.ts_count + 1)]
        elif config.t_stop is not None:
            n = int(math.floor(config.t_stop / config.ts_interval))
            times = [k * config.ts_interval for k in range(1, n + 1)] or [float(config.t_stop)]
        else:
            raise ConfigError("ts_interval needs ts_count or t_stop")
    else:
        times = []
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("output times must be strictly increasing")
    if times and times[0] < 0:
        raise ConfigError("output times must be >= 0")
    return times


def determine_stop_time(config: SimulationConfig, store: FlowStore) -> float:
    if config.mode == "timeseries":
        times = output_times(config)
        if not times:
            raise ConfigError("timeseries run with no output times")
        if config.t_stop is not None and times[-1] > config.t_stop:
            raise ConfigError(f"output time {times[-1]} beyond t_stop {config.t_stop}")
        t_stop = times[-1] if config.t_stop is None else float(config.t_stop)
    elif config.t_stop is not None:
        t_stop = float(config.t_stop)
    else:
        if math.isfinite(store.horizon):
            raise ConfigError("run until termination needs an unbounded final flow snapshot")
        return math.inf
    if t_stop > store.horizon:
        raise ConfigError(f"stop time {t_stop} beyond the flow horizon {store.horizon}")
    return t_stop


# -- simulation ------------------------------------------------------------------


@dataclass
class SimulationSummary:
    elapsed: float
    timings: dict
    loop_stats: LoopStats
    status_histogram: dict
    t_stop: float
    output_times: list
    dispatches: int
    workers: int
    particles: ParticleArrays = field(repr=False)
    output_paths: list = field(default_factory=list)
    endpoint_path: Path | None = None

    def as_dict(self) -> dict:
        return {
            "elapsed_s": self.elapsed,
            "timings_s": self.timings,
            "counters": self.loop_stats.counters(),
            "per_worker": self.loop_stats.per_worker,
            "status": self.status_histogram,
            "t_stop": self.t_stop,
            "dispatches": self.dispatches,
            "workers": self.workers,
        }


def _record_mode(mode: str) -> RecordMode:
    return {"endpoint": RecordMode.ENDPOINT, "timeseries": RecordMode.TIMESERIES,
            "pathline": RecordMode.PATHLINE}[mode]


def run_simulation(config: SimulationConfig, store: FlowStore, particles: ParticleArrays | None = None,
                   step_hook=None) -> SimulationSummary:
    """Run the nested time-step / tracking / particle loops.

    ``particles`` overrides ``config.release``. ``step_hook(t_max, ts_max,
    t_stop)``, if given, is called before every particle-loop dispatch.
    """
    t_stop = determine_stop_time(config, store)
    times = output_times(config) if config.mode == "timeseries" else []
    if particles is None:
        particles = release_particles(config.release, store.grid, config.mode)
    if particles.grid.shape != store.grid.shape:
        raise ConfigError("particle grid does not match the flow grid")
    n_workers = effective_workers(int(config.workers), config.oversubscribe)
    out_dir = Path(config.out_dir) if config.out_dir else None
    digest = config.digest()

    protocol = None
    if config.mode != "endpoint":
        if out_dir is None:
            raise ConfigError(f"{config.mode} mode needs out_dir")
        if config.mode == "pathline":
            protocol = open_protocol("parallel_exclusive", out_dir, n_workers, digest, "pathline", PATH_DTYPE)
        else:
            protocol = open_protocol(config.protocol, out_dir, n_workers, digest, "timeseries", TS_DTYPE)
        (out_dir / PARTIAL_MARKER).unlink(missing_ok=True)

    engines = [TrackingEngine(store, 0, config.weak_sink_policy, config.record_capacity)
               for _ in range(n_workers)]
    observers = [protocol.observer(w) if protocol else None for w in range(n_workers)]
    rec_mode = _record_mode(config.mode)
    totals = LoopStats(per_worker=[0] * n_workers)
    timings = {"flow_update": 0.0, "particle_loops": 0.0, "output_steps": 0.0}
    dispatches = 0
    out_idx = 0

    t0 = time.perf_counter()
    try:
        for period in range(len(store)):
            tf = time.perf_counter()
            for e in engines:
                e.period = period
            timings["flow_update"] += time.perf_counter() - tf
            ts_max = float(store.ends[period])
            finished = False
            while True:
                next_out = times[out_idx] if out_idx < len(times) else math.inf
                t_max = min(next_out, ts_max, t_stop)
                if step_hook is not None:
                    step_hook(t_max, ts_max, t_stop)
                is_output = out_idx < len(times) and t_max == next_out
                final = t_max >= t_stop
                live = (particles.status == Status.ACTIVE) | (
                    (particles.status == Status.PENDING) & (particles.release <= t_max))
                order = np.flatnonzero(live)
                target = LoopTarget(t_max, rec_mode, record_at_limit=is_output,
                                    stop_at_limit=final, time_index=out_idx + 1 if is_output else 0)
                stats = run_particle_loop(particles, n_workers, config.schedule,
                                          engines.__getitem__, observers.__getitem__, target, order)
                totals += stats
                timings["particle_loops"] += stats.wall_time
                dispatches += 1
                if is_output:
                    tc = time.perf_counter()
                    protocol.end_step(out_idx + 1)
                    timings["output_steps"] += time.perf_counter() - tc
                    out_idx += 1
                if final:
                    finished = True
                    break
                if t_max >= ts_max:
                    break
            if finished:
                break
        if protocol is not None:
            protocol.flush()
        elapsed = time.perf_counter() - t0
    except BaseException as exc:
        if protocol is not None:
            protocol.close()
            (out_dir / PARTIAL_MARKER).write_text(f"run aborted: {exc}\n")
        raise
    output_paths = []
    if protocol is not None:
        protocol.close()
        output_paths = protocol.paths()
    endpoint_path = None
    if out_dir is not None and config.write_endpoints:
        out_dir.mkdir(parents=True, exist_ok=True)
        endpoint_path = out_dir / "endpoint.dat"
        write_endpoint_file(particles, endpoint_path, digest)
    return SimulationSummary(elapsed, timings, totals, particles.status_histogram(), t_stop, times,
                             dispatches, n_workers, particles, output_paths, endpoint_path)


def config_from_mapping(values: dict, base: SimulationConfig | None = None) -> SimulationConfig:
    """Build a config from ``key = value`` strings (see :func:`parse_config_text`)."""
    base = base or SimulationConfig()
    kw = {}
    sched_kind, chunk = base.schedule.kind, base.schedule.chunk
    for key, value in values.items():
        if key == "schedule":
            sched_kind = value
        elif key == "chunk":
            chunk = int(value)
        elif key in ("t_stop", "ts_interval"):
            kw[key] = None if value.lower() in ("", "none", "inf") else float(value)
        elif key == "ts_times":
            kw[key] = tuple(float(v) for v in value.replace(",", " ").split())
        elif key in ("ts_count", "workers", "seed", "record_capacity"):
            kw[key] = int(value)
        elif key in ("oversubscribe", "write_endpoints"):
            kw[key] = value.lower() in ("1", "true", "yes", "on")
        elif key == "weak_sink_policy":
            kw[key] = WeakSinkPolicy[value.upper()]
        elif key in ("mode", "protocol", "out_dir"):
            kw[key] = value
        elif key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    kw["schedule"] = ScheduleSpec(sched_kind, chunk)
    return replace(base, **kw)
