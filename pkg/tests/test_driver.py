import math

import numpy as np
import pytest

from ptrack.driver import (
    PARTIAL_MARKER, ConfigError, FaceRegion, LineRegion, ReleaseStage, SimulationConfig,
    config_from_mapping, determine_stop_time, output_times, parse_config_text, release_particles,
    run_simulation,
)
from ptrack.flow import FlowStore
from ptrack.output import decode_pathlines, decode_timeseries, endpoint_records, read_endpoint_file
from ptrack.scheduler import ScheduleSpec
from ptrack.tracking import Status


@pytest.fixture(scope="module")
def desk(tc1_desk):
    spec, snap = tc1_desk
    return spec, snap, FlowStore([snap])


def test_output_times_even_split():
    cfg = SimulationConfig(mode="timeseries", t_stop=1.0, ts_count=3)
    times = output_times(cfg)
    assert len(times) == 3 and times[-1] == 1.0
    assert times[0] == pytest.approx(1 / 3)


def test_output_times_interval_and_list():
    assert output_times(SimulationConfig(mode="timeseries", ts_interval=2.0, ts_count=3)) == [2.0, 4.0, 6.0]
    assert output_times(SimulationConfig(mode="timeseries", ts_interval=4.0, t_stop=10.0)) == [4.0, 8.0]
    with pytest.raises(ConfigError):
        output_times(SimulationConfig(mode="timeseries", ts_times=(2.0, 1.0)))


def test_stop_time_rules(desk):
    _, snap, store = desk
    assert determine_stop_time(SimulationConfig(), store) == math.inf
    assert determine_stop_time(SimulationConfig(t_stop=5.0), store) == 5.0
    assert determine_stop_time(SimulationConfig(mode="timeseries", ts_times=(1.0, 3.0)), store) == 3.0
    with pytest.raises(ConfigError, match="no output times"):
        determine_stop_time(SimulationConfig(mode="timeseries"), store)
    with pytest.raises(ConfigError, match="beyond t_stop"):
        determine_stop_time(SimulationConfig(mode="timeseries", ts_times=(9.0,), t_stop=5.0), store)
    bounded = FlowStore([snap.with_duration(10.0)])
    with pytest.raises(ConfigError, match="until termination"):
        determine_stop_time(SimulationConfig(), bounded)
    with pytest.raises(ConfigError, match="horizon"):
        determine_stop_time(SimulationConfig(t_stop=11.0), bounded)


def test_config_validation():
    with pytest.raises(ConfigError):
        SimulationConfig(mode="movie")
    with pytest.raises(ConfigError):
        SimulationConfig(workers=0)
    with pytest.raises(ConfigError):
        SimulationConfig(mode="pathline", protocol="consolidated")
    with pytest.raises(ConfigError):
        SimulationConfig(t_stop=-1.0)


def test_config_text():
    vals = parse_config_text("mode = timeseries  # comment\nts-count = 4\nt_stop = 8\nschedule = static\n")
    cfg = config_from_mapping(vals)
    assert cfg.mode == "timeseries" and cfg.ts_count == 4 and cfg.t_stop == 8.0
    assert cfg.schedule == ScheduleSpec("static_balanced", 1)
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("nonsense\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_mapping({"colour": "red"})


def test_digest_ignores_execution_settings():
    a = SimulationConfig(mode="endpoint", workers=1, schedule=ScheduleSpec("static"))
    b = SimulationConfig(mode="endpoint", workers=3, schedule=ScheduleSpec("dynamic", 8), protocol="critical")
    assert a.digest() == b.digest()
    assert a.digest() != SimulationConfig(mode="endpoint", t_stop=3.0).digest()


def test_line_release_spacing():
    g = build_line_grid()
    pa = release_particles([ReleaseStage(0.0, 3, LineRegion(10.0, 0.0, 300.0, 0.5))], g)
    assert np.allclose(pa.positions()[:, 1], [50.0, 150.0, 250.0])
    assert np.all(pa.positions()[:, 0] == 10.0)


def build_line_grid():
    from ptrack.grid import build_structured

    return build_structured(20, 300, 1, 1.0, 1.0, [1.0])


def test_face_release_centroid_and_ids():
    from ptrack.grid import build_structured

    g = build_structured(4, 4, 1, 10.0, 10.0, [5.0])
    region = FaceRegion(0.0, 20.0, 10.0, 30.0, 5.0)
    pa = release_particles([ReleaseStage(1.0, 16, region, group=2), ReleaseStage(3.0, 4, region)], g)
    assert np.array_equal(pa.pid, np.arange(20))
    xyz = pa.positions()[:16]
    assert np.allclose(xyz.mean(axis=0), [10.0, 20.0, 5.0])
    assert np.all(pa.group[:16] == 2) and np.all(pa.release[16:] == 3.0)
    # on the top face the particle sits in the top cell at zloc = 1
    assert np.all(pa.zl == 1.0)


def test_degenerate_release_regions():
    g = build_line_grid()
    with pytest.raises(ConfigError, match="zero-length"):
        release_particles([ReleaseStage(0.0, 2, LineRegion(1.0, 5.0, 5.0, 0.5))], g)
    assert len(release_particles([ReleaseStage(0.0, 1, LineRegion(1.0, 5.0, 5.0, 0.5))], g)) == 1
    with pytest.raises(ConfigError):
        ReleaseStage(-1.0, 1, LineRegion(1.0, 0.0, 1.0, 0.5))


def test_tc2_release_schedule(tc2_base):
    spec, _ = tc2_base
    times = sorted({s.time for s in spec.release})
    assert times == [20.0 * k for k in range(10)]
    assert sum(s.count for s in spec.release) == 1000


def test_zero_stop_time_writes_release_state(desk, tmp_path):
    spec, _, store = desk
    cfg = SimulationConfig(t_stop=0.0, release=spec.release[:1], out_dir=str(tmp_path))
    s = run_simulation(cfg, store)
    assert s.status_histogram == {"reached_stop_time": spec.release[0].count}
    ep = read_endpoint_file(s.endpoint_path)
    assert np.array_equal(ep["cell0"], ep["cell1"])
    assert np.all(ep["t1"] == 0.0)


def test_uniform_flow_travel_time(tc1_uniform_small):
    spec, snap = tc1_uniform_small
    s = run_simulation(SimulationConfig(release=spec.release), spec.flow_store(snap))
    pa = s.particles
    assert s.status_histogram == {"reached_boundary": len(pa)}
    lx = spec.grid.nx * spec.grid.dx
    np.testing.assert_allclose(pa.time - pa.release, lx - 10.0, rtol=1e-9)


def _run(store, spec, **kw):
    cfg = SimulationConfig(release=spec.release, **kw)
    return run_simulation(cfg, store)


def test_split_snapshots_reproduce_single(desk):
    spec, snap, store = desk
    split = FlowStore([snap.with_duration(17.25), snap.with_duration(40.0), snap.with_duration(math.inf)])
    a = endpoint_records(_run(store, spec).particles)
    b = endpoint_records(_run(split, spec).particles)
    assert a.tobytes() == b.tobytes()


def test_output_steps_do_not_perturb_endpoints(desk, tmp_path):
    spec, _, store = desk
    t_stop = 150.0
    a = _run(store, spec, t_stop=t_stop)
    b = _run(store, spec, mode="timeseries", t_stop=t_stop, ts_count=7, out_dir=str(tmp_path))
    assert endpoint_records(a.particles).tobytes() == endpoint_records(b.particles).tobytes()


def test_one_record_per_live_particle_per_output(tc2_base, tmp_path):
    spec, snap = tc2_base
    store = spec.flow_store(snap)
    cfg = SimulationConfig(mode="timeseries", t_stop=100.0, ts_count=5, release=spec.release,
                           out_dir=str(tmp_path))
    s = run_simulation(cfg, store)
    rec = decode_timeseries(s.output_paths)
    pa = s.particles
    for idx, t in enumerate(s.output_times, start=1):
        step = rec[rec["time_index"] == idx]
        assert np.all(step["time"] == t)
        ids = np.sort(step["particle_id"])
        # released by t and not terminated before t
        expected = pa.pid[(pa.release <= t) & ~((pa.status != Status.REACHED_STOP_TIME) & (pa.time < t))]
        assert np.array_equal(ids, np.sort(expected))


def test_step_hook_bounds(tc2_base, tmp_path):
    spec, snap = tc2_base
    store = spec.flow_store(snap)
    seen = []

    def hook(t_max, ts_max, t_stop):
        assert t_max <= min(ts_max, t_stop)
        seen.append(t_max)

    cfg = SimulationConfig(mode="timeseries", t_stop=3000.0, ts_count=4, release=spec.release,
                           out_dir=str(tmp_path))
    s = run_simulation(cfg, store, step_hook=hook)
    assert seen == sorted(seen) and seen[-1] == 3000.0
    assert {1.0, 1001.0, 2001.0} <= set(seen)  # flow period ends
    assert set(s.output_times) <= set(seen)
    assert s.dispatches == len(seen)


def test_pathline_mode(desk, tmp_path):
    spec, _, store = desk
    plan = [ReleaseStage(0.0, 20, spec.release[0].region)]
    s = run_simulation(SimulationConfig(mode="pathline", release=plan, workers=1, out_dir=str(tmp_path)), store)
    rec = decode_pathlines(s.output_paths)
    for pid in range(20):
        r = rec[rec["particle_id"] == pid]
        assert np.all(np.diff(r["segment"]) >= 0) and np.all(np.diff(r["time"]) >= 0)
        assert r["segment"][0] == 0 and r["time"][0] == 0.0
    assert rec["segment"].max() > 10


def test_partial_marker_on_failure(desk, tmp_path):
    spec, _, store = desk

    def boom(*_):
        raise RuntimeError("injected")

    cfg = SimulationConfig(mode="timeseries", t_stop=10.0, ts_count=2, release=spec.release,
                           out_dir=str(tmp_path))
    with pytest.raises(RuntimeError, match="injected"):
        run_simulation(cfg, store, step_hook=boom)
    assert (tmp_path / PARTIAL_MARKER).exists()
    run_simulation(cfg, store)
    assert not (tmp_path / PARTIAL_MARKER).exists()


def test_timeseries_needs_out_dir(desk):
    spec, _, store = desk
    with pytest.raises(ConfigError, match="out_dir"):
        run_simulation(SimulationConfig(mode="timeseries", t_stop=1.0, ts_count=1, release=spec.release), store)


def test_summary_counters(desk):
    spec, _, store = desk
    s = _run(store, spec, workers=1)
    c = s.as_dict()["counters"]
    assert c["particles_completed"] == len(s.particles)
    assert c["cell_initializations"] > len(s.particles)
    assert s.elapsed >= s.timings["particle_loops"] > 0
