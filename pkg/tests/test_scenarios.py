import numpy as np
import pytest

from ptrack.flow import relative_cell_imbalance
from ptrack.scenarios import TC2_DZ, build_tc1, build_tc2, sink_cells, tc2_grid


def test_tc1_dimensions_and_gradient():
    spec, snap = build_tc1(sigma2=0.0, n_particles=10, scale=0.2)
    g = spec.grid
    assert (g.nx, g.ny, g.nz) == (300, 60, 1)
    h = snap.heads[0, 0]
    grad = -(h[-1] - h[0]) / ((g.nx - 1) * g.dx)
    assert grad == pytest.approx(1.0, rel=1e-9)


def test_tc1_deterministic_per_seed():
    a = build_tc1(sigma2=2.5, n_particles=10, seed=3, scale=0.1)[1]
    b = build_tc1(sigma2=2.5, n_particles=10, seed=3, scale=0.1)[1]
    c = build_tc1(sigma2=2.5, n_particles=10, seed=4, scale=0.1)[1]
    assert a.qx.tobytes() == b.qx.tobytes()
    assert a.qx.tobytes() != c.qx.tobytes()


def test_tc1_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_tc1(sigma2=6.0)
    with pytest.raises(ValueError):
        build_tc1(scale=0.0)


def test_tc2_layout(tc2_base):
    spec, snap = tc2_base
    g = spec.grid
    assert (g.nx, g.ny, g.nz) == (21, 20, 3)
    assert list(g.dz_array) == list(TC2_DZ)
    assert np.all(snap.qz[-1] <= 0)  # recharge enters through the top
    assert spec.period_durations[0] == 1.0 and spec.period_durations[-1] == np.inf


def test_tc2_sinks_and_wells(tc2_base):
    _, snap = tc2_base
    with_wells = sink_cells(snap)
    without = sink_cells(build_tc2(n_particles=10, wells=False)[1])
    assert with_wells["strong"] > without["strong"]
    assert with_wells["weak"] > 0


def test_tc2_refined_grid_and_budget():
    g = tc2_grid(2)
    assert g.nx * g.ny == 1680 and g.dx == 250.0
    spec, snap = build_tc2(n_particles=10, refine=2)
    base = build_tc2(n_particles=10)[1]
    wells_r = sum(q for _, q in spec.bcs.wells)
    assert wells_r == pytest.approx(-1.75e5)
    # same recharge area, so the total recharge inflow matches the base grid
    assert snap.qz[-1].sum() == pytest.approx(base.qz[-1].sum(), rel=1e-12)
    assert relative_cell_imbalance(snap).max() <= 1e-8


def test_tc2_scale_shrinks_horizon():
    spec, _ = build_tc2(n_particles=10, scale=0.01)
    assert spec.defaults["t_stop"] == pytest.approx(600.0)
    assert spec.period_durations[1] == pytest.approx(10.0)
