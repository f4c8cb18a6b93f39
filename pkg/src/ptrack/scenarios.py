"""Builders for the two synthetic test cases.

TC1: single-layer heterogeneous aquifer, uniform mean gradient of 1 from
``x = 0`` (head ``10 + L_x``) to ``x = L_x`` (head 10), lognormal
conductivity with exponential covariance (``I_Y = 10`` m). Particles start on
the line ``x = 10`` m and are tracked to the outlet.

TC2: three homogeneous layers (two aquifers separated by an aquitard) on a
21 x 20 grid of 500 m cells, recharge, an east-edge river, a drain row and two
pumping wells. Layer index 0 is the bottom layer. Placements on the base
(refine=1) grid, as (column i, row j), all fixed here:

=========  =======================================================
river      top layer, column i = 20, every row
drains     top layer, row j = 10, columns i = 12..17
W1         top layer, (9, 12), -7.5e4 m3/d
W3         bottom layer, (14, 7), -1e5 m3/d
release    top faces of the top-layer cells i in {0, 1}, j in {18, 19}
=========  =======================================================

With ``refine = 2`` every cell becomes 2 x 2 cells of 250 m; wells, river and
drain conductances are split evenly over the sub-cells and the release area
is unchanged, so the physical problem is the same.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .driver import FaceRegion, LineRegion, ReleaseStage
from .flow import BoundaryConditionSet, ConductivityTensor, FlowSnapshot, FlowStore, SinkClass, solve_steady
from .geostat import generate_field, scale_to_conductivity
from .grid import Face, Grid, build_structured
from .tracking import WeakSinkPolicy

logger = logging.getLogger(__name__)

# TC1
TC1_LX, TC1_LY, TC1_CELL = 1500, 300, 1.0
TC1_CORR_LEN = 10.0
TC1_OUTLET_HEAD = 10.0
TC1_INJECTION_X = 10.0

# TC2 (layer lists bottom-first)
TC2_NX, TC2_NY, TC2_CELL = 21, 20, 500.0
TC2_DZ = (200.0, 20.0, 130.0)
TC2_KH = (200.0, 0.01, 50.0)
TC2_KZ = (20.0, 0.01, 10.0)
TC2_RECHARGE = 5e-3
TC2_W1 = ((9, 12, 2), -7.5e4)
TC2_W3 = ((14, 7, 0), -1.0e5)
TC2_RIVER = (320.0, 317.0, 1.0e5)  # stage, bottom, conductance per base cell
TC2_DRAIN_ROW, TC2_DRAIN_COLS = 10, range(12, 18)
TC2_DRAIN = (322.5, 1.0e5)  # elevation, conductance per base cell
TC2_RELEASE_CELLS = ((0, 18), (1, 18), (0, 19), (1, 19))
TC2_T_TS = 60000.0
TC2_STAGES, TC2_STAGE_INTERVAL = 10, 20.0
# flow periods: steady, transient split in steps, final steady (identical BCs)
TC2_FIRST_PERIOD = 1.0
TC2_TRANSIENT_STEPS, TC2_STEP_LENGTH = 10, 1000.0


@dataclass
class ScenarioSpec:
    name: str
    grid: Grid
    conductivity: ConductivityTensor
    bcs: BoundaryConditionSet
    release: list
    defaults: dict = field(default_factory=dict)
    scale: float = 1.0
    porosity: float = 1.0
    period_durations: tuple = (math.inf,)
    params: dict = field(default_factory=dict)

    def flow_store(self, snapshot: FlowSnapshot) -> FlowStore:
        """Store holding one copy of ``snapshot`` per flow period."""
        return FlowStore([snapshot.with_duration(d) for d in self.period_durations])


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(int(total), parts)
    return [base + (1 if s < extra else 0) for s in range(parts)]


def build_tc1(sigma2: float = 2.5, n_particles: int = 1000, seed: int = 0, scale: float = 1.0,
              porosity: float = 1.0, method: str = "direct"):
    """Return ``(ScenarioSpec, FlowSnapshot)`` for TC1."""
    if not 0 <= sigma2 <= 5:
        raise ValueError(f"sigma2 must lie in [0, 5], got {sigma2}")
    if not 0 < scale <= 1:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    nx = max(1, round(TC1_LX * scale))
    ny = max(1, round(TC1_LY * scale))
    lx, ly = nx * TC1_CELL, ny * TC1_CELL
    if lx < 10 * TC1_CORR_LEN:
        logger.warning("TC1 at scale %g spans only %.1f correlation lengths in x", scale, lx / TC1_CORR_LEN)
    grid = build_structured(nx, ny, 1, TC1_CELL, TC1_CELL, [1.0])
    if sigma2 > 0:
        field_ = generate_field(nx, ny, TC1_CELL, TC1_CELL, TC1_CORR_LEN, seed)
        k = scale_to_conductivity(field_, sigma2).K[None, :, :]
    else:
        k = np.ones((1, ny, nx))
    cond = ConductivityTensor.from_values(grid, k)
    inlet = TC1_OUTLET_HEAD + lx
    chd = [(grid.cell_id(0, j, 0), inlet, Face.X_LOW) for j in range(ny)]
    chd += [(grid.cell_id(nx - 1, j, 0), TC1_OUTLET_HEAD, Face.X_HIGH) for j in range(ny)]
    bcs = BoundaryConditionSet(constant_heads=chd)
    release = [ReleaseStage(0.0, n_particles, LineRegion(TC1_INJECTION_X, 0.0, ly, 0.5))]
    spec = ScenarioSpec(
        "tc1", grid, cond, bcs, release,
        defaults={"mode": "endpoint", "t_stop": None, "ts_count": 10, "ts_horizon": lx - TC1_INJECTION_X},
        scale=scale, porosity=porosity,
        params={"sigma2": sigma2, "n_particles": n_particles, "seed": seed, "scale": scale,
                "porosity": porosity},
    )
    snap = solve_steady(grid, cond, bcs, method=method, porosity=porosity)
    return spec, snap


def tc2_grid(refine: int = 1) -> Grid:
    return build_structured(TC2_NX * refine, TC2_NY * refine, 3, TC2_CELL / refine, TC2_CELL / refine,
                            list(TC2_DZ))


def build_tc2(n_particles: int = 1000, ts_count: int = 5, refine: int = 1, scale: float = 1.0,
              wells: bool = True, porosity: float = 1.0, method: str = "direct"):
    """Return ``(ScenarioSpec, FlowSnapshot)`` for TC2.

    ``scale`` shrinks the simulated timeseries horizon (and the flow periods)
    for quick runs; the flow problem itself is always full size.
    """
    if refine not in (1, 2, 3, 4):
        raise ValueError(f"refine must be a small positive integer, got {refine}")
    if not 0 < scale <= 1:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    if ts_count < 1:
        raise ValueError(f"ts_count must be >= 1, got {ts_count}")
    r = refine
    grid = tc2_grid(r)
    top = grid.nz - 1
    cond = ConductivityTensor.layered(grid, TC2_KH, TC2_KZ)

    def subcells(i, j, k):
        return [grid.cell_id(r * i + a, r * j + b, k) for b in range(r) for a in range(r)]

    well_list = []
    if wells:
        for (i, j, k), q in (TC2_W1, TC2_W3):
            well_list += [(c, q / r**2) for c in subcells(i, j, k)]
    stage, bottom, c_riv = TC2_RIVER
    rivers = [(c, stage, bottom, c_riv / r**2) for j in range(TC2_NY) for c in subcells(TC2_NX - 1, j, top)]
    elev, c_drn = TC2_DRAIN
    drains = [(c, elev, c_drn / r**2) for i in TC2_DRAIN_COLS for c in subcells(i, TC2_DRAIN_ROW, top)]
    bcs = BoundaryConditionSet(wells=well_list, recharge=TC2_RECHARGE, rivers=rivers, drains=drains)

    i0 = min(i for i, _ in TC2_RELEASE_CELLS)
    i1 = max(i for i, _ in TC2_RELEASE_CELLS) + 1
    j0 = min(j for _, j in TC2_RELEASE_CELLS)
    j1 = max(j for _, j in TC2_RELEASE_CELLS) + 1
    region = FaceRegion(i0 * TC2_CELL, i1 * TC2_CELL, j0 * TC2_CELL, j1 * TC2_CELL, sum(TC2_DZ))
    release = [ReleaseStage(s * TC2_STAGE_INTERVAL, n, region)
               for s, n in enumerate(_split(n_particles, TC2_STAGES))]

    t_ts = TC2_T_TS * scale
    periods = ((TC2_FIRST_PERIOD * scale,) + (TC2_STEP_LENGTH * scale,) * TC2_TRANSIENT_STEPS
               + (math.inf,))
    spec = ScenarioSpec(
        "tc2", grid, cond, bcs, release,
        defaults={"mode": "timeseries", "t_stop": t_ts, "ts_count": ts_count,
                  "weak_sink_policy": WeakSinkPolicy.PASS_THROUGH},
        scale=scale, porosity=porosity, period_durations=periods,
        params={"n_particles": n_particles, "ts_count": ts_count, "refine": refine, "scale": scale,
                "wells": wells, "porosity": porosity},
    )
    snap = solve_steady(grid, cond, bcs, method=method, porosity=porosity)
    return spec, snap


def sink_cells(snapshot: FlowSnapshot) -> dict[str, int]:
    """Count weak and strong sink cells of a solved snapshot."""
    cls = FlowStore([snapshot]).sink_classes[0]
    return {"weak": int(np.sum(cls == SinkClass.WEAK_SINK)), "strong": int(np.sum(cls == SinkClass.STRONG_SINK))}
