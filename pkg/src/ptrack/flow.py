"""Steady finite-difference flow and the shared flow-data store.

Face-flow arrays cover every face including the hull and are signed positive
toward increasing index along their axis:

    qx: (nz, ny, nx + 1)    qy: (nz, ny + 1, nx)    qz: (nz + 1, ny, nx)

so hull entries ``qx[..., 0]`` and ``qx[..., -1]`` are the boundary-face
flows. Recharge enters through the top hull face (``qz[-1]``, negative),
constant heads may sit either on a cell (head fixed at the cell centre) or on
a hull face of a cell (head fixed on the face, half-cell conductance). Wells,
rivers, drains and cell-based constant heads are cell-internal terms and are
collected in ``cell_source_sink``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Face, Grid, build_structured

logger = logging.getLogger(__name__)

BALANCE_TOL = 1e-8
FORMAT_TAG = "PTRACE-FLOW"
FORMAT_VERSION = "v1"


class FlowSolverError(RuntimeError):
    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class SingularSystemError(FlowSolverError):
    pass


class SnapshotFormatError(ValueError):
    pass


class SinkClass(enum.IntEnum):
    NO_SINK = 0
    WEAK_SINK = 1
    STRONG_SINK = 2


@dataclass
class BoundaryConditionSet:
    """Boundary conditions.

    ``constant_heads`` entries are ``(cell, head)`` or ``(cell, head, face)``;
    ``recharge`` is a scalar or ``(ny, nx)`` flux array applied to the top
    layer; the remaining lists hold ``(cell, rate)``, ``(cell, stage, bottom,
    conductance)`` and ``(cell, elevation, conductance)`` tuples.
    """

    constant_heads: list = field(default_factory=list)
    wells: list = field(default_factory=list)
    recharge: object = None
    rivers: list = field(default_factory=list)
    drains: list = field(default_factory=list)

    def validate(self, grid: Grid) -> None:
        for entry in self.constant_heads:
            grid.ijk(entry[0])
        for cell, *_ in self.wells:
            grid.ijk(cell)
        for cell, _stage, bottom, cond in self.rivers:
            grid.ijk(cell)
            if cond < 0:
                raise ValueError(f"negative river conductance {cond} at cell {cell}")
        for cell, _elev, cond in self.drains:
            grid.ijk(cell)
            if cond < 0:
                raise ValueError(f"negative drain conductance {cond} at cell {cell}")
        if not (self.constant_heads or self.rivers or self.drains):
            raise SingularSystemError("no constant-head or head-dependent boundary: heads are undetermined")


@dataclass
class ConductivityTensor:
    kxx: np.ndarray
    kyy: np.ndarray
    kzz: np.ndarray

    @classmethod
    def from_values(cls, grid: Grid, kxx, kyy=None, kzz=None) -> "ConductivityTensor":
        kyy = kxx if kyy is None else kyy
        kzz = kxx if kzz is None else kzz
        arrs = [np.broadcast_to(np.asarray(a, dtype=np.float64), grid.shape).copy() for a in (kxx, kyy, kzz)]
        for name, a in zip(("kxx", "kyy", "kzz"), arrs):
            if not np.all(a > 0):
                raise ValueError(f"{name} must be strictly positive")
        return cls(*arrs)

    @classmethod
    def layered(cls, grid: Grid, kh_by_layer, kz_by_layer) -> "ConductivityTensor":
        kh = np.asarray(kh_by_layer, dtype=np.float64)[:, None, None]
        kz = np.asarray(kz_by_layer, dtype=np.float64)[:, None, None]
        return cls.from_values(grid, kh, kh, kz)


@dataclass
class FlowSnapshot:
    grid: Grid
    heads: np.ndarray
    qx: np.ndarray
    qy: np.ndarray
    qz: np.ndarray
    cell_source_sink: np.ndarray
    porosity: np.ndarray
    duration: float = math.inf
    outer_iterations: int = 0

    def __post_init__(self):
        g = self.grid
        nz, ny, nx = g.shape
        expect = {
            "heads": (nz, ny, nx), "qx": (nz, ny, nx + 1), "qy": (nz, ny + 1, nx),
            "qz": (nz + 1, ny, nx), "cell_source_sink": (nz, ny, nx), "porosity": (nz, ny, nx),
        }
        for name, shape in expect.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        if not (np.all(self.porosity > 0) and np.all(self.porosity <= 1)):
            raise ValueError("porosity must lie in (0, 1]")
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")

    def net_face_inflow(self) -> np.ndarray:
        return (self.qx[:, :, :-1] - self.qx[:, :, 1:]
                + self.qy[:, :-1, :] - self.qy[:, 1:, :]
                + self.qz[:-1] - self.qz[1:])

    def abs_face_flow(self) -> np.ndarray:
        return (np.abs(self.qx[:, :, :-1]) + np.abs(self.qx[:, :, 1:])
                + np.abs(self.qy[:, :-1, :]) + np.abs(self.qy[:, 1:, :])
                + np.abs(self.qz[:-1]) + np.abs(self.qz[1:]))

    def balance_residuals(self) -> np.ndarray:
        return self.net_face_inflow() + self.cell_source_sink

    def with_duration(self, duration) -> "FlowSnapshot":
        return FlowSnapshot(self.grid, self.heads, self.qx, self.qy, self.qz,
                            self.cell_source_sink, self.porosity, duration, self.outer_iterations)


def cell_mass_balance(snapshot: FlowSnapshot, cell: int) -> float:
    """Net inflow across the six faces plus the internal source/sink."""
    i, j, k = snapshot.grid.ijk(cell)
    s = snapshot
    return float(
        s.qx[k, j, i] - s.qx[k, j, i + 1]
        + s.qy[k, j, i] - s.qy[k, j + 1, i]
        + s.qz[k, j, i] - s.qz[k + 1, j, i]
        + s.cell_source_sink[k, j, i]
    )


def relative_cell_imbalance(snapshot: FlowSnapshot) -> np.ndarray:
    scale = snapshot.abs_face_flow() + np.abs(snapshot.cell_source_sink)
    res = np.abs(snapshot.balance_residuals())
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, res / np.where(scale > 0, scale, 1.0), res)
    return rel


def global_balance(snapshot: FlowSnapshot) -> tuple[float, float]:
    """Return ``(inflow - outflow, inflow + outflow)`` over hull faces and internal terms."""
    s = snapshot
    hull_in = (s.qx[:, :, 0] - s.qx[:, :, -1]).sum() + (s.qy[:, 0, :] - s.qy[:, -1, :]).sum() \
        + (s.qz[0] - s.qz[-1]).sum()
    hull_abs = np.abs(s.qx[:, :, [0, -1]]).sum() + np.abs(s.qy[:, [0, -1], :]).sum() \
        + np.abs(s.qz[[0, -1]]).sum()
    src = s.cell_source_sink
    return float(hull_in + src.sum()), float(hull_abs + np.abs(src).sum())


def interblock_conductance(k1, k2, d1, d2, area):
    """Harmonic-mean conductance between two cells, half-widths ``d1/2``, ``d2/2``."""
    return area / (0.5 * d1 / k1 + 0.5 * d2 / k2)


def _face_conductances(grid: Grid, cond: ConductivityTensor):
    dz = grid.dz_array[:, None, None]
    ax = grid.dy * dz
    ay = grid.dx * dz
    az = grid.dx * grid.dy
    cx = interblock_conductance(cond.kxx[:, :, :-1], cond.kxx[:, :, 1:], grid.dx, grid.dx, ax)
    cy = interblock_conductance(cond.kyy[:, :-1, :], cond.kyy[:, 1:, :], grid.dy, grid.dy, ay)
    cz = interblock_conductance(cond.kzz[:-1], cond.kzz[1:], dz[:-1], dz[1:], az)
    return cx, cy, cz


def _hull_conductance(grid: Grid, cond: ConductivityTensor, cell: int, face: Face) -> float:
    i, j, k = grid.ijk(cell)
    axis = face.axis
    kk = (cond.kxx, cond.kyy, cond.kzz)[axis][k, j, i]
    width = (grid.dx, grid.dy, grid.dz[k])[axis]
    return kk * grid.face_area(cell, face) / (0.5 * width)


def _is_hull_face(grid: Grid, cell: int, face: Face) -> bool:
    i, j, k = grid.ijk(cell)
    idx, n = ((i, grid.nx), (j, grid.ny), (k, grid.nz))[face.axis]
    return idx == (0 if face.side == 0 else n - 1)


def _laplacian(grid: Grid, cx, cy, cz) -> sp.csr_matrix:
    n = grid.ncells
    ids = np.arange(n).reshape(grid.shape)
    rows, cols, vals = [], [], []
    for c, a, b in (
        (cx, ids[:, :, :-1], ids[:, :, 1:]),
        (cy, ids[:, :-1, :], ids[:, 1:, :]),
        (cz, ids[:-1], ids[1:]),
    ):
        a, b, c = a.ravel(), b.ravel(), np.broadcast_to(c, a.shape).ravel()
        rows += [a, b]
        cols += [b, a]
        vals += [-c, -c]
    off = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def pcg(A, b, x0=None, tol=1e-10, maxiter=None):
    """Jacobi-preconditioned conjugate gradient.

    Returns ``(x, residual_history)`` where the history holds relative
    residual norms; raises :class:`FlowSolverError` on non-convergence.
    """
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - A @ x
    bnorm = np.linalg.norm(b) or 1.0
    z = dinv * r
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    for _ in range(maxiter):
        if history[-1] <= tol:
            return x, history
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        history.append(np.linalg.norm(r) / bnorm)
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if history[-1] <= tol:
        return x, history
    raise FlowSolverError(f"CG did not reach relative residual {tol} in {maxiter} iterations "
                          f"(final {history[-1]:.3e})", history)


def solve_steady(grid: Grid, conductivity: ConductivityTensor, bcs: BoundaryConditionSet,
                 tol=1e-10, max_outer=50, max_inner=None, method="direct",
                 porosity=1.0, duration=math.inf, head_tol=1e-8) -> FlowSnapshot:
    """Solve for steady heads and face flows.

    River and drain terms are linearised by Picard iteration: each outer pass
    fixes which rivers are clamped (head at or below the river bottom) and which
    drains are active (head above the drain elevation), solves the resulting
    SPD system, and repeats until no clamp state changes and the largest head
    change is below ``head_tol``.

    ``method`` is ``"direct"`` (sparse LU) or ``"cg"`` (Jacobi-PCG to a
    relative residual of ``tol``).
    """
    bcs.validate(grid)
    if method not in ("direct", "cg"):
        raise ValueError(f"unknown solver method {method!r}")
    n = grid.ncells
    nz, ny, nx = grid.shape
    cx, cy, cz = _face_conductances(grid, conductivity)
    lap = _laplacian(grid, cx, cy, cz)

    fixed = np.zeros(n, dtype=bool)
    fixed_head = np.zeros(n)
    hull_diag = np.zeros(n)
    hull_rhs = np.zeros(n)
    hull_terms = []  # (cell, face, conductance, head)
    for entry in bcs.constant_heads:
        cell, head = int(entry[0]), float(entry[1])
        face = entry[2] if len(entry) > 2 else None
        if face is None:
            fixed[cell] = True
            fixed_head[cell] = head
        else:
            face = Face(face)
            if not _is_hull_face(grid, cell, face):
                raise ValueError(f"constant-head face {face.name} of cell {cell} is not on the domain hull")
            c = _hull_conductance(grid, conductivity, cell, face)
            hull_diag[cell] += c
            hull_rhs[cell] += c * head
            hull_terms.append((cell, face, c, head))

    recharge = np.zeros((ny, nx))
    if bcs.recharge is not None:
        recharge = np.broadcast_to(np.asarray(bcs.recharge, dtype=np.float64), (ny, nx)).copy()
    q_recharge = np.zeros(n)
    top = np.arange(n).reshape(grid.shape)[nz - 1].ravel()
    q_recharge[top] = recharge.ravel() * grid.dx * grid.dy

    q_wells = np.zeros(n)
    for cell, rate in bcs.wells:
        q_wells[int(cell)] += float(rate)

    riv_cell = np.array([r[0] for r in bcs.rivers], dtype=np.int64)
    riv_stage = np.array([r[1] for r in bcs.rivers], dtype=np.float64)
    riv_bot = np.array([r[2] for r in bcs.rivers], dtype=np.float64)
    riv_c = np.array([r[3] for r in bcs.rivers], dtype=np.float64)
    drn_cell = np.array([d[0] for d in bcs.drains], dtype=np.int64)
    drn_elev = np.array([d[1] for d in bcs.drains], dtype=np.float64)
    drn_c = np.array([d[2] for d in bcs.drains], dtype=np.float64)

    free = ~fixed
    free_idx = np.flatnonzero(free)
    lap_ff = lap[free_idx][:, free_idx].tocsr()
    lap_fc = lap[free_idx][:, np.flatnonzero(fixed)]
    base_rhs = q_recharge + q_wells + hull_rhs
    base_rhs_f = base_rhs[free_idx] - lap_fc @ fixed_head[fixed]

    riv_active = np.ones(riv_cell.size, dtype=bool)
    drn_active = np.ones(drn_cell.size, dtype=bool)
    h = fixed_head.copy()
    history = []
    h_free_prev = None
    for outer in range(1, max_outer + 1):
        diag = hull_diag.copy()
        rhs = np.zeros(n)
        np.add.at(diag, riv_cell[riv_active], riv_c[riv_active])
        np.add.at(rhs, riv_cell[riv_active], (riv_c * riv_stage)[riv_active])
        clamped = ~riv_active
        np.add.at(rhs, riv_cell[clamped], (riv_c * (riv_stage - riv_bot))[clamped])
        np.add.at(diag, drn_cell[drn_active], drn_c[drn_active])
        np.add.at(rhs, drn_cell[drn_active], (drn_c * drn_elev)[drn_active])
        if not fixed.any() and not np.any(diag > 0):
            raise SingularSystemError("no head reference: all rivers clamped and drains inactive", history)
        A = (lap_ff + sp.diags(diag[free_idx])).tocsr()
        b = base_rhs_f + rhs[free_idx]
        if method == "direct":
            h_free = spla.spsolve(A.tocsc(), b)
            if not np.all(np.isfinite(h_free)):
                raise SingularSystemError("singular flow matrix", history)
        else:
            h_free, hist = pcg(A, b, h_free_prev, tol=tol, maxiter=max_inner)
            history.extend(hist)
        h[free_idx] = h_free
        new_riv = h[riv_cell] > riv_bot
        new_drn = h[drn_cell] > drn_elev
        change = np.inf if h_free_prev is None else float(np.max(np.abs(h_free - h_free_prev), initial=0.0))
        stable = np.array_equal(new_riv, riv_active) and np.array_equal(new_drn, drn_active)
        h_free_prev = h_free
        riv_active, drn_active = new_riv, new_drn
        if stable and (change < head_tol or not (riv_cell.size or drn_cell.size)):
            break
    else:
        raise FlowSolverError(f"Picard iteration did not settle in {max_outer} outer iterations", history)

    heads = h.reshape(grid.shape)
    qx = np.zeros((nz, ny, nx + 1))
    qy = np.zeros((nz, ny + 1, nx))
    qz = np.zeros((nz + 1, ny, nx))
    qx[:, :, 1:-1] = cx * (heads[:, :, :-1] - heads[:, :, 1:])
    qy[:, 1:-1, :] = cy * (heads[:, :-1, :] - heads[:, 1:, :])
    qz[1:-1] = cz * (heads[:-1] - heads[1:])
    qz[-1] -= recharge * grid.dx * grid.dy
    for cell, face, c, head in hull_terms:
        i, j, k = grid.ijk(cell)
        hc = heads[k, j, i]
        inflow = c * (head - hc)
        if face == Face.X_LOW:
            qx[k, j, 0] += inflow
        elif face == Face.X_HIGH:
            qx[k, j, nx] -= inflow
        elif face == Face.Y_LOW:
            qy[k, 0, i] += inflow
        elif face == Face.Y_HIGH:
            qy[k, ny, i] -= inflow
        elif face == Face.Z_LOW:
            qz[0, j, i] += inflow
        else:
            qz[nz, j, i] -= inflow

    src = q_wells.copy()
    hr = h[riv_cell]
    np.add.at(src, riv_cell, np.where(hr > riv_bot, riv_c * (riv_stage - hr), riv_c * (riv_stage - riv_bot)))
    hd = h[drn_cell]
    np.add.at(src, drn_cell, np.where(hd > drn_elev, drn_c * (drn_elev - hd), 0.0))
    src = src.reshape(grid.shape)
    snap = FlowSnapshot(grid, heads, qx, qy, qz, src, np.broadcast_to(porosity, grid.shape), duration, outer)
    if fixed.any():
        # cell-based constant heads absorb whatever the faces deliver
        net = snap.net_face_inflow().ravel()
        flat = snap.cell_source_sink.ravel()
        flat[fixed] = -net[fixed]
        snap.cell_source_sink = flat.reshape(grid.shape)
    return snap


# -- shared store ---------------------------------------------------------


class FlowStore:
    """Read-only container of flow snapshots shared by all tracking engines.

    Snapshot ``p`` is active on ``[start[p], start[p] + duration[p])``; a time
    exactly on a period boundary selects the later period. Only the final
    snapshot may have an unbounded duration.
    """

    def __init__(self, snapshots, grid: Grid | None = None):
        snapshots = list(snapshots)
        if not snapshots:
            raise ValueError("FlowStore needs at least one snapshot")
        self.grid = grid or snapshots[0].grid
        for s in snapshots:
            if s.grid.shape != self.grid.shape:
                raise ValueError("snapshot grid does not match store grid")
        for s in snapshots[:-1]:
            if not math.isfinite(s.duration):
                raise ValueError("only the final snapshot may have unbounded duration")
        self.snapshots = tuple(snapshots)
        starts = np.concatenate([[0.0], np.cumsum([s.duration for s in snapshots[:-1]])])
        self.starts = starts
        self.ends = starts + np.array([s.duration for s in snapshots])
        self.sink_classes = tuple(_classify_all(s) for s in snapshots)
        for arr in self.sink_classes:
            arr.setflags(write=False)
        # epoch p changes only where the velocity field differs from period p - 1
        epochs = [0]
        for a, b in zip(snapshots, snapshots[1:]):
            same = (np.array_equal(a.qx, b.qx) and np.array_equal(a.qy, b.qy)
                    and np.array_equal(a.qz, b.qz) and np.array_equal(a.porosity, b.porosity))
            epochs.append(epochs[-1] + (0 if same else 1))
        self.epochs = np.array(epochs, dtype=np.int64)

    def __len__(self):
        return len(self.snapshots)

    @property
    def horizon(self) -> float:
        return float(self.ends[-1])

    def snapshot_index(self, time: float) -> int:
        if time < 0:
            raise ValueError(f"negative time {time}")
        if time > self.horizon:
            raise ValueError(f"time {time} beyond the flow horizon {self.horizon}")
        idx = int(np.searchsorted(self.starts, time, side="right")) - 1
        return min(idx, len(self.snapshots) - 1)

    def face_velocities(self, cell: int, time: float) -> np.ndarray:
        """Seepage velocities ``[x_low, x_high, y_low, y_high, z_low, z_high]``."""
        p = self.snapshot_index(time)
        return cell_face_velocities(self.snapshots[p], cell)

    def classify_cell(self, cell: int, time: float) -> SinkClass:
        p = self.snapshot_index(time)
        i, j, k = self.grid.ijk(cell)
        return SinkClass(int(self.sink_classes[p][k, j, i]))


def cell_face_velocities(snapshot: FlowSnapshot, cell: int) -> np.ndarray:
    g = snapshot.grid
    i, j, k = g.ijk(cell)
    theta = snapshot.porosity[k, j, i]
    ax = g.dy * g.dz[k] * theta
    ay = g.dx * g.dz[k] * theta
    az = g.dx * g.dy * theta
    s = snapshot
    return np.array([
        s.qx[k, j, i] / ax, s.qx[k, j, i + 1] / ax,
        s.qy[k, j, i] / ay, s.qy[k, j + 1, i] / ay,
        s.qz[k, j, i] / az, s.qz[k + 1, j, i] / az,
    ])


def _classify_all(snapshot: FlowSnapshot) -> np.ndarray:
    s = snapshot
    outflow = ((s.qx[:, :, :-1] < 0) | (s.qx[:, :, 1:] > 0)
               | (s.qy[:, :-1, :] < 0) | (s.qy[:, 1:, :] > 0)
               | (s.qz[:-1] < 0) | (s.qz[1:] > 0))
    sink = s.cell_source_sink < 0
    cls = np.zeros(s.grid.shape, dtype=np.int8)
    cls[sink & outflow] = SinkClass.WEAK_SINK
    cls[sink & ~outflow] = SinkClass.STRONG_SINK
    return cls


def classify_cell(store: FlowStore, cell: int, time: float) -> SinkClass:
    return store.classify_cell(cell, time)


def face_velocities(store: FlowStore, cell: int, time: float) -> np.ndarray:
    return store.face_velocities(cell, time)


# -- snapshot files ---------------------------------------------------------

_ARRAYS = ("HEADS", "FACEFLOW_X", "FACEFLOW_Y", "FACEFLOW_Z", "CELL_SRCSNK")


def save_snapshot(snapshot: FlowSnapshot, path, start: float = 0.0) -> None:
    g = snapshot.grid
    lines = [
        f"{FORMAT_TAG} {FORMAT_VERSION}",
        f"DIMS {g.nx} {g.ny} {g.nz}",
        f"SPACING {g.dx!r} {g.dy!r}",
        "DZ " + " ".join(repr(float(d)) for d in g.dz),
        "ORIGIN " + " ".join(repr(float(o)) for o in g.origin),
    ]
    por = snapshot.porosity
    const = np.all(por == por.flat[0])
    lines.append(f"POROSITY_CONST {float(por.flat[0])!r}" if const else "POROSITY_ARRAY")
    lines.append(f"PERIOD {float(start)!r} {float(snapshot.duration)!r}")
    arrays = [snapshot.heads, snapshot.qx, snapshot.qy, snapshot.qz, snapshot.cell_source_sink]
    labels = list(_ARRAYS)
    if not const:
        arrays.append(por)
        labels.append("POROSITY")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for label, arr in zip(labels, arrays):
            fh.write(f"{label} {arr.size}\n")
            fh.write("\n".join(map("{:.17g}".format, arr.ravel().tolist())))
            fh.write("\n")


def load_snapshot(path) -> FlowSnapshot:
    """Read a snapshot written by :func:`save_snapshot`."""
    lines = Path(path).read_text().splitlines()
    pos = 0

    def header(key):
        nonlocal pos
        if pos >= len(lines):
            raise SnapshotFormatError(f"{path}: truncated before header {key}")
        parts = lines[pos].split()
        if not parts or parts[0] != key:
            raise SnapshotFormatError(f"{path}:{pos + 1}: expected {key}, found {lines[pos]!r}")
        pos += 1
        return parts[1:]

    if not lines:
        raise SnapshotFormatError(f"{path}: empty file")
    tag = lines[0].split()
    if len(tag) != 2 or tag[0] != FORMAT_TAG:
        raise SnapshotFormatError(f"{path}: not a {FORMAT_TAG} file")
    if tag[1] != FORMAT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported version {tag[1]} (expected {FORMAT_VERSION})")
    pos = 1
    try:
        nx, ny, nz = map(int, header("DIMS"))
        dx, dy = map(float, header("SPACING"))
        dz = [float(v) for v in header("DZ")]
        origin = [float(v) for v in header("ORIGIN")]
        if pos < len(lines) and lines[pos].startswith("POROSITY_CONST"):
            por_const = float(header("POROSITY_CONST")[0])
        else:
            header("POROSITY_ARRAY")
            por_const = None
        _start, duration = map(float, header("PERIOD"))
    except ValueError as exc:
        if isinstance(exc, SnapshotFormatError):
            raise
        raise SnapshotFormatError(f"{path}:{pos}: malformed header ({exc})") from None
    if len(dz) != nz:
        raise SnapshotFormatError(f"{path}: DZ has {len(dz)} values for {nz} layers")
    grid = build_structured(nx, ny, nz, dx, dy, dz, origin)
    shapes = {
        "HEADS": grid.shape, "FACEFLOW_X": (nz, ny, nx + 1), "FACEFLOW_Y": (nz, ny + 1, nx),
        "FACEFLOW_Z": (nz + 1, ny, nx), "CELL_SRCSNK": grid.shape, "POROSITY": grid.shape,
    }
    labels = list(_ARRAYS) + ([] if por_const is not None else ["POROSITY"])
    data = {}
    for label in labels:
        if pos >= len(lines):
            raise SnapshotFormatError(f"{path}: truncated, missing section {label}")
        (count,) = header(label)
        count = int(count)
        size = int(np.prod(shapes[label]))
        if count != size:
            raise SnapshotFormatError(f"{path}: section {label} has {count} values, grid needs {size}")
        chunk = lines[pos:pos + count]
        if len(chunk) < count:
            raise SnapshotFormatError(f"{path}: truncated inside section {label} "
                                      f"({len(chunk)} of {count} values)")
        data[label] = np.array(chunk, dtype=np.float64).reshape(shapes[label])
        pos += count
    porosity = data.get("POROSITY", np.full(grid.shape, por_const if por_const is not None else 1.0))
    return FlowSnapshot(grid, data["HEADS"], data["FACEFLOW_X"], data["FACEFLOW_Y"], data["FACEFLOW_Z"],
                        data["CELL_SRCSNK"], porosity, duration)
