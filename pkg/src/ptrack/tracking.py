"""Semi-analytical cell-by-cell particle advection.

Inside a cell each seepage-velocity component varies linearly between its two
faces, ``v(x) = v_low + A (x - x_low)`` with ``A = (v_high - v_low) / delta``,
so the motion along every axis has a closed form and the time to reach a face
follows from a logarithm. The particle leaves through the face it reaches
first, lands in the neighbour and the process repeats until a stopping
condition fires.

All hot code is compiled with numba (``nogil``) so that several worker threads
can track particles at once. The Python-level helpers at the bottom wrap the
same compiled functions for single-particle use and testing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._atomics import fetch_add
from .flow import FlowStore, SinkClass, cell_face_velocities
from .grid import Face, Grid

EPS_A_REL = 1e-12
EPS_CLAMP = 1e-9
# more zero-length exits in a row than a 3D corner can produce
MAX_ZERO_STEPS = 3


class Status(enum.IntEnum):
    PENDING = 0
    ACTIVE = 1
    REACHED_BOUNDARY = 2
    REACHED_STOP_TIME = 3
    STRONG_SINK_STOP = 4
    STAGNANT = 5
    WEAK_SINK_STOP = 6


TERMINAL = (Status.REACHED_BOUNDARY, Status.REACHED_STOP_TIME, Status.STRONG_SINK_STOP,
            Status.STAGNANT, Status.WEAK_SINK_STOP)


class WeakSinkPolicy(enum.IntEnum):
    PASS_THROUGH = 0
    STOP = 1


class RecordMode(enum.IntEnum):
    ENDPOINT = 0
    TIMESERIES = 1
    PATHLINE = 2


class TrackingConsistencyError(RuntimeError):
    pass


# outcome kinds of a single in-cell displacement
EXITED_FACE = 0
HIT_TIME_LIMIT = 1
STOPPED = 2

# per-worker statistics slots
ST_PROCESSED = 0
ST_COMPLETED = 1
ST_RECORDS = 2
ST_WEAK_PASSES = 3
ST_ERROR = 4
ST_CELL_INITS = 5
N_STATS = 6

# record buffer columns; text and binary schemas share this order
RECORD_FIELDS = ("time_index", "time", "particle_id", "group", "cell", "layer",
                 "x", "y", "z", "xloc", "yloc", "zloc", "segment")
N_RECORD_COLS = len(RECORD_FIELDS)

_PENDING = int(Status.PENDING)
_ACTIVE = int(Status.ACTIVE)
_BOUNDARY = int(Status.REACHED_BOUNDARY)
_STOPTIME = int(Status.REACHED_STOP_TIME)
_STRONG = int(Status.STRONG_SINK_STOP)
_STAGNANT = int(Status.STAGNANT)
_WEAKSTOP = int(Status.WEAK_SINK_STOP)


@njit(nogil=True, cache=True, error_model="numpy")
def _axis_exit(v_low, v_high, x_local, delta):
    a = (v_high - v_low) / delta
    vp = v_low + a * (x_local * delta)
    if vp == 0.0:
        return math.inf, -1
    vmax = max(abs(v_low), abs(v_high))
    if abs(a) < EPS_A_REL * vmax / delta:
        if vp > 0.0:
            return (1.0 - x_local) * delta / vp, 1
        return -(x_local * delta) / vp, 0
    if vp > 0.0:
        if v_high <= 0.0:
            return math.inf, -1
        d = (1.0 - x_local) * delta
        return math.log1p(a * d / vp) / a, 1
    if v_low >= 0.0:
        return math.inf, -1
    d = -x_local * delta
    return math.log1p(a * d / vp) / a, 0


@njit(nogil=True, cache=True, error_model="numpy")
def _position(v_low, a, x_local, dt, delta):
    vp = v_low + a * (x_local * delta)
    if vp == 0.0:
        return x_local
    v_high = v_low + a * delta
    vmax = max(abs(v_low), abs(v_high))
    if abs(a) < EPS_A_REL * vmax / delta or a == 0.0:
        return x_local + vp * dt / delta
    return x_local + vp * math.expm1(a * dt) / a / delta


@njit(nogil=True, cache=True, error_model="numpy")
def _advance(vxl, vxh, vyl, vyh, vzl, vzh, dx, dy, dz, xl, yl, zl, remaining):
    """One in-cell displacement; returns (kind, axis, side, dt, xl, yl, zl, clamp_error)."""
    best = math.inf
    axis = -1
    side = -1
    dt, s = _axis_exit(vxl, vxh, xl, dx)
    if s >= 0 and dt < best:
        best, axis, side = dt, 0, s
    dt, s = _axis_exit(vyl, vyh, yl, dy)
    if s >= 0 and dt < best:
        best, axis, side = dt, 1, s
    dt, s = _axis_exit(vzl, vzh, zl, dz)
    if s >= 0 and dt < best:
        best, axis, side = dt, 2, s
    if axis < 0:
        return STOPPED, -1, -1, 0.0, xl, yl, zl, False
    kind = EXITED_FACE
    if best > remaining:
        kind = HIT_TIME_LIMIT
        best = remaining
        axis = -1
        side = -1
    if axis == 0:
        nx_ = float(side)
    else:
        nx_ = _position(vxl, (vxh - vxl) / dx, xl, best, dx)
    if axis == 1:
        ny_ = float(side)
    else:
        ny_ = _position(vyl, (vyh - vyl) / dy, yl, best, dy)
    if axis == 2:
        nz_ = float(side)
    else:
        nz_ = _position(vzl, (vzh - vzl) / dz, zl, best, dz)
    err = False
    if nx_ < -EPS_CLAMP or nx_ > 1.0 + EPS_CLAMP:
        err = True
    if ny_ < -EPS_CLAMP or ny_ > 1.0 + EPS_CLAMP:
        err = True
    if nz_ < -EPS_CLAMP or nz_ > 1.0 + EPS_CLAMP:
        err = True
    nx_ = min(max(nx_, 0.0), 1.0)
    ny_ = min(max(ny_, 0.0), 1.0)
    nz_ = min(max(nz_, 0.0), 1.0)
    return kind, axis, side, best, nx_, ny_, nz_, err


@njit(nogil=True, cache=True, error_model="numpy")
def _emit(buf, n, time_index, t, pid, group, i, j, k, xl, yl, zl, seg,
          nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz):
    buf[n, 0] = time_index
    buf[n, 1] = t
    buf[n, 2] = pid
    buf[n, 3] = group
    buf[n, 4] = i + nx * (j + ny * k)
    buf[n, 5] = nz - k
    buf[n, 6] = ox + (i + xl) * dx
    buf[n, 7] = oy + (j + yl) * dy
    buf[n, 8] = oz + (zbot[k] + zl * dz[k])
    buf[n, 9] = xl
    buf[n, 10] = yl
    buf[n, 11] = zl
    buf[n, 12] = seg


@njit(nogil=True, cache=True, error_model="numpy")
def _run_block(nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz,
               qx, qy, qz, poro, sinkcls,
               order, pid, pgroup, ci, cj, ck, xl, yl, zl, ptime, prel, status, nseg, nzero,
               ex, ey, ez, etime, eepoch, epoch,
               counters, slot, chunk, limit, cursor,
               t_limit, weak_stop, rec_mode, rec_at_limit, stop_at_limit, time_index,
               buf, stats):
    """Claim work and track particles until the work runs out or ``buf`` fills.

    Work is claimed in chunks from ``counters[slot]`` by atomic fetch-add; the
    claimed range ``[cursor[0], cursor[1])`` of positions in ``order`` survives
    between calls, as does all per-particle state, so a call that returns with
    ``done = False`` resumes exactly where it stopped.

    Every in-cell displacement is computed from the cell-entry state
    (``ex/ey/ez``, ``etime``). A particle halted at ``t_limit`` therefore
    resumes bit-identically as long as the velocity field is unchanged
    (same ``epoch``); otherwise the entry state is re-anchored at the
    current position.
    """
    cap = buf.shape[0]
    nrec = 0
    while True:
        if cursor[0] >= cursor[1]:
            start = fetch_add(counters, slot, chunk)
            if start >= limit:
                return nrec, True
            cursor[0] = start
            cursor[1] = min(start + chunk, limit)
        if nrec + 2 > cap:
            return nrec, False
        p = order[cursor[0]]
        st = status[p]
        if st == _PENDING and prel[p] <= t_limit:
            st = _ACTIVE
            ptime[p] = prel[p]
            i, j, k = ci[p], cj[p], ck[p]
            ex[p], ey[p], ez[p] = xl[p], yl[p], zl[p]
            etime[p] = prel[p]
            eepoch[p] = epoch
            if rec_mode == 2:
                _emit(buf, nrec, time_index, ptime[p], pid[p], pgroup[p], i, j, k, xl[p], yl[p], zl[p],
                      nseg[p], nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz)
                nrec += 1
            cls = sinkcls[k, j, i]
            if cls == 2:
                st = _STRONG
            elif cls == 1:
                if weak_stop:
                    st = _WEAKSTOP
                else:
                    stats[ST_WEAK_PASSES] += 1
            status[p] = st
            if st != _ACTIVE:
                stats[ST_COMPLETED] += 1
        if st == _ACTIVE:
            i, j, k = ci[p], cj[p], ck[p]
            x, y, z = xl[p], yl[p], zl[p]
            t = ptime[p]
            if eepoch[p] != epoch:
                ex[p], ey[p], ez[p] = x, y, z
                etime[p] = t
                eepoch[p] = epoch
            x0, y0, z0 = ex[p], ey[p], ez[p]
            t0 = etime[p]
            seg = nseg[p]
            nzr = nzero[p]
            ninit = 0
            full = False
            while True:
                if nrec + 2 > cap:
                    full = True
                    break
                th = poro[k, j, i]
                dzk = dz[k]
                ax = dy * dzk * th
                ay = dx * dzk * th
                az = dx * dy * th
                ninit += 1
                kind, axis, side, dt, nxl, nyl, nzl, err = _advance(
                    qx[k, j, i] / ax, qx[k, j, i + 1] / ax,
                    qy[k, j, i] / ay, qy[k, j + 1, i] / ay,
                    qz[k, j, i] / az, qz[k + 1, j, i] / az,
                    dx, dy, dzk, x0, y0, z0, t_limit - t0)
                if err:
                    stats[ST_ERROR] = p + 1
                    full = True
                    break
                if kind == STOPPED:
                    st = _STAGNANT
                    if rec_mode == 2:
                        _emit(buf, nrec, time_index, t, pid[p], pgroup[p], i, j, k, x, y, z,
                              seg, nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz)
                        nrec += 1
                    break
                x, y, z = nxl, nyl, nzl
                if kind == HIT_TIME_LIMIT:
                    t = t_limit
                    if rec_mode == 1 and rec_at_limit:
                        _emit(buf, nrec, time_index, t, pid[p], pgroup[p], i, j, k, x, y, z,
                              seg, nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz)
                        nrec += 1
                    if stop_at_limit:
                        st = _STOPTIME
                        if rec_mode == 2:
                            _emit(buf, nrec, time_index, t, pid[p], pgroup[p], i, j, k, x, y, z,
                                  seg, nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz)
                            nrec += 1
                    break
                t = t0 + dt
                if dt == 0.0:
                    nzr += 1
                    if nzr > MAX_ZERO_STEPS:
                        st = _STAGNANT
                        break
                else:
                    nzr = 0
                ni, nj, nk = i, j, k
                step = 2 * side - 1
                if axis == 0:
                    ni += step
                elif axis == 1:
                    nj += step
                else:
                    nk += step
                if ni < 0 or ni >= nx or nj < 0 or nj >= ny or nk < 0 or nk >= nz:
                    st = _BOUNDARY
                    if rec_mode == 2:
                        _emit(buf, nrec, time_index, t, pid[p], pgroup[p], i, j, k, x, y, z,
                              seg, nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz)
                        nrec += 1
                    break
                i, j, k = ni, nj, nk
                if axis == 0:
                    x = 1.0 - side
                elif axis == 1:
                    y = 1.0 - side
                else:
                    z = 1.0 - side
                x0, y0, z0 = x, y, z
                t0 = t
                seg += 1
                if rec_mode == 2:
                    _emit(buf, nrec, time_index, t, pid[p], pgroup[p], i, j, k, x, y, z,
                          seg, nx, ny, nz, dx, dy, dz, zbot, ox, oy, oz)
                    nrec += 1
                cls = sinkcls[k, j, i]
                if cls == 2:
                    st = _STRONG
                    break
                elif cls == 1:
                    if weak_stop:
                        st = _WEAKSTOP
                        break
                    stats[ST_WEAK_PASSES] += 1
            ci[p], cj[p], ck[p] = i, j, k
            xl[p], yl[p], zl[p] = x, y, z
            ptime[p] = t
            ex[p], ey[p], ez[p] = x0, y0, z0
            etime[p] = t0
            nseg[p] = seg
            nzero[p] = nzr
            stats[ST_CELL_INITS] += ninit
            if full:
                return nrec, stats[ST_ERROR] != 0
        if st != status[p]:
            status[p] = st
            if st != _ACTIVE:
                stats[ST_COMPLETED] += 1
        cursor[0] += 1
        stats[ST_PROCESSED] += 1


# -- particle containers -----------------------------------------------------


@dataclass
class Particle:
    id: int
    group: int
    cell: int
    local: tuple[float, float, float]
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    time: float = 0.0
    release_time: float = 0.0
    status: Status = Status.PENDING


class ParticleArrays:
    """Structure-of-arrays particle state shared (by index) with the workers.

    Each particle index is touched by exactly one worker per loop, so the
    arrays need no locking. ``init_*`` hold the release state for endpoint
    records.
    """

    def __init__(self, grid: Grid, ids, groups, cells, local, release_times):
        n = len(ids)
        self.grid = grid
        self.pid = np.asarray(ids, dtype=np.int64).copy()
        self.group = np.asarray(groups, dtype=np.int64).copy()
        cells = np.asarray(cells, dtype=np.int64)
        if n and (cells.min() < 0 or cells.max() >= grid.ncells):
            raise ValueError("particle cell id outside grid")
        self.ci = cells % grid.nx
        self.cj = (cells // grid.nx) % grid.ny
        self.ck = cells // (grid.nx * grid.ny)
        local = np.asarray(local, dtype=np.float64).reshape(n, 3)
        if n and (local.min() < 0 or local.max() > 1):
            raise ValueError("local coordinates must lie in [0, 1]")
        self.xl = local[:, 0].copy()
        self.yl = local[:, 1].copy()
        self.zl = local[:, 2].copy()
        self.release = np.asarray(release_times, dtype=np.float64).copy()
        if n and self.release.min() < 0:
            raise ValueError("release times must be >= 0")
        self.time = self.release.copy()
        self.status = np.full(n, _PENDING, dtype=np.int64)
        self.nseg = np.zeros(n, dtype=np.int64)
        self.nzero = np.zeros(n, dtype=np.int64)
        # cell-entry state of the current in-cell displacement
        self.ex = self.xl.copy()
        self.ey = self.yl.copy()
        self.ez = self.zl.copy()
        self.etime = self.time.copy()
        self.eepoch = np.full(n, -1, dtype=np.int64)
        self.init_cell = cells.copy()
        self.init_time = self.release.copy()
        self.init_xyz = self.positions()

    @classmethod
    def from_particles(cls, grid: Grid, particles) -> "ParticleArrays":
        particles = list(particles)
        pa = cls(grid, [p.id for p in particles], [p.group for p in particles],
                 [p.cell for p in particles], [p.local for p in particles],
                 [p.release_time for p in particles])
        pa.time[:] = [p.time if p.status != Status.PENDING else p.release_time for p in particles]
        pa.status[:] = [int(p.status) for p in particles]
        return pa

    def __len__(self):
        return self.pid.size

    @property
    def cells(self) -> np.ndarray:
        g = self.grid
        return self.ci + g.nx * (self.cj + g.ny * self.ck)

    def positions(self) -> np.ndarray:
        g = self.grid
        ox, oy, oz = g.origin
        x = ox + (self.ci + self.xl) * g.dx
        y = oy + (self.cj + self.yl) * g.dy
        z = oz + (g.zbot[self.ck] + self.zl * g.dz_array[self.ck])
        return np.column_stack([x, y, z])

    def particle(self, n: int) -> Particle:
        pos = self.positions()[n]
        return Particle(int(self.pid[n]), int(self.group[n]), int(self.cells[n]),
                        (float(self.xl[n]), float(self.yl[n]), float(self.zl[n])),
                        tuple(float(v) for v in pos), float(self.time[n]),
                        float(self.release[n]), Status(int(self.status[n])))

    def status_histogram(self) -> dict[str, int]:
        vals, counts = np.unique(self.status, return_counts=True)
        return {Status(int(v)).name.lower(): int(c) for v, c in zip(vals, counts)}


# -- per-worker engine -----------------------------------------------------------


@dataclass
class TrackingEngine:
    """Per-worker tracking engine.

    Holds only a handle to the shared :class:`FlowStore`, the index of the
    active snapshot, and private scratch (record buffer, claim cursor,
    statistics). Engines are never shared between workers.
    """

    store: FlowStore
    period: int = 0
    weak_sink_policy: WeakSinkPolicy = WeakSinkPolicy.PASS_THROUGH
    record_capacity: int = 4096
    buffer: np.ndarray = field(init=False, repr=False)
    cursor: np.ndarray = field(init=False, repr=False)
    stats: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.buffer = np.empty((max(self.record_capacity, 2), N_RECORD_COLS), dtype=np.float64)
        self.cursor = np.zeros(2, dtype=np.int64)
        self.stats = np.zeros(N_STATS, dtype=np.int64)

    def reset_cursor(self):
        self.cursor[:] = 0

    def run(self, particles: ParticleArrays, order, counters, slot, chunk, limit, t_limit,
            rec_mode=RecordMode.ENDPOINT, rec_at_limit=False, stop_at_limit=False, time_index=0):
        """Run the compiled block kernel once; returns ``(n_records, done)``."""
        g = self.store.grid
        snap = self.store.snapshots[self.period]
        nrec, done = _run_block(
            g.nx, g.ny, g.nz, g.dx, g.dy, g.dz_array, g.zbot, *g.origin,
            snap.qx, snap.qy, snap.qz, snap.porosity, self.store.sink_classes[self.period],
            order, particles.pid, particles.group, particles.ci, particles.cj, particles.ck,
            particles.xl, particles.yl, particles.zl, particles.time, particles.release,
            particles.status, particles.nseg, particles.nzero,
            particles.ex, particles.ey, particles.ez, particles.etime, particles.eepoch,
            int(self.store.epochs[self.period]),
            counters, slot, chunk, limit, self.cursor,
            float(t_limit), bool(self.weak_sink_policy == WeakSinkPolicy.STOP), int(rec_mode),
            bool(rec_at_limit), bool(stop_at_limit), int(time_index),
            self.buffer, self.stats,
        )
        if self.stats[ST_ERROR]:
            bad = int(self.stats[ST_ERROR]) - 1
            raise TrackingConsistencyError(
                f"particle {int(particles.pid[bad])}: local coordinate left the cell by more than "
                f"{EPS_CLAMP} in cell {int(particles.cells[bad])}")
        self.stats[ST_RECORDS] += nrec
        return nrec, done


# -- Python-level kernel API ---------------------------------------------------------


def axis_exit_candidate(v_low, v_high, x_local, delta):
    """Time to leave along one axis and the side (0 low, 1 high), or ``(None, None)``."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    dt, side = _axis_exit(float(v_low), float(v_high), float(x_local), float(delta))
    if side < 0:
        return None, None
    return dt, side


def analytic_position(v_low, gradient, x_start_local, dt, delta):
    """Local coordinate after ``dt`` under ``v = v_low + gradient * (x - x_low)``."""
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    return _position(float(v_low), float(gradient), float(x_start_local), float(dt), float(delta))


@dataclass
class CellVelocityState:
    cell: int
    v_low: np.ndarray
    v_high: np.ndarray
    delta: np.ndarray
    sink: SinkClass = SinkClass.NO_SINK
    gradient: np.ndarray = field(init=False)

    def __post_init__(self):
        self.v_low = np.asarray(self.v_low, dtype=np.float64)
        self.v_high = np.asarray(self.v_high, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.gradient = (self.v_high - self.v_low) / self.delta

    @classmethod
    def from_store(cls, store: FlowStore, cell: int, time: float) -> "CellVelocityState":
        p = store.snapshot_index(time)
        v = cell_face_velocities(store.snapshots[p], cell)
        return cls(cell, v[0::2], v[1::2], np.asarray(store.grid.cell_size(cell)),
                   store.classify_cell(cell, time))


@dataclass
class TrackOutcome:
    kind: str  # "exited_face", "hit_time_limit" or "stopped"
    dt: float
    exit_local: tuple[float, float, float]
    face: Face | None = None
    reason: str | None = None


def advance_in_cell(state: CellVelocityState, particle: Particle, t_limit: float) -> TrackOutcome:
    """Displace ``particle`` inside its current cell (the particle is not modified)."""
    if particle.cell != state.cell:
        raise ValueError(f"particle in cell {particle.cell} but velocity state is for cell {state.cell}")
    if particle.time > t_limit:
        raise ValueError(f"particle time {particle.time} beyond t_limit {t_limit}")
    if state.sink == SinkClass.STRONG_SINK:
        return TrackOutcome("stopped", 0.0, tuple(particle.local), reason="strong_sink")
    vl, vh, d = state.v_low, state.v_high, state.delta
    kind, axis, side, dt, x, y, z, err = _advance(
        vl[0], vh[0], vl[1], vh[1], vl[2], vh[2], d[0], d[1], d[2],
        *map(float, particle.local), t_limit - particle.time)
    if err:
        raise TrackingConsistencyError(f"clamp tolerance {EPS_CLAMP} exceeded in cell {state.cell}")
    if kind == STOPPED:
        return TrackOutcome("stopped", 0.0, tuple(particle.local), reason="stagnant")
    if kind == HIT_TIME_LIMIT:
        return TrackOutcome("hit_time_limit", dt, (x, y, z))
    return TrackOutcome("exited_face", dt, (x, y, z), face=Face(2 * axis + side))


def track_particle(store: FlowStore, particle: Particle, t_max: float,
                   weak_sink_policy=WeakSinkPolicy.PASS_THROUGH, observer=None,
                   period: int | None = None) -> Particle:
    """Track one particle to a terminal state or ``t_max`` with the compiled engine.

    ``observer``, if given, is called with one record row (see
    :data:`RECORD_FIELDS`) at release, at every cell transfer and at the
    terminal point. Reaching ``t_max`` sets ``reached_stop_time``.
    """
    if particle.release_time > t_max:
        raise ValueError(f"particle released at {particle.release_time} after t_max {t_max}")
    pa = ParticleArrays.from_particles(store.grid, [particle])
    if period is None:
        period = store.snapshot_index(max(particle.time, particle.release_time))
    engine = TrackingEngine(store, period, WeakSinkPolicy(weak_sink_policy), record_capacity=256)
    order = np.zeros(1, dtype=np.int64)
    mode = RecordMode.PATHLINE if observer is not None else RecordMode.ENDPOINT
    while True:
        engine.period = period
        t_end = min(t_max, float(store.ends[period]))
        final = t_end >= t_max
        counters = np.zeros(1, dtype=np.int64)
        engine.reset_cursor()
        done = False
        while not done:
            nrec, done = engine.run(pa, order, counters, 0, 1, 1, t_end, mode,
                                    stop_at_limit=final, time_index=period + 1)
            if observer is not None:
                for row in engine.buffer[:nrec]:
                    observer(row.copy())
        if final or pa.status[0] != _ACTIVE:
            break
        period += 1
    return pa.particle(0)
