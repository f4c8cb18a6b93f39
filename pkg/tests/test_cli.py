import json

import pytest

from ptrack.cli import BenchMatrix, emit_speedup_report, fill_ratios, main, read_bench_csv, run_bench
from ptrack.driver import ConfigError


@pytest.mark.parametrize("argv", [
    ["--threads", "0"],
    ["--np", "-3"],
    ["--mode", "endpoint", "--protocol", "consolidated"],
    ["--mode", "pathline", "--protocol", "critical_single"],
    ["--scale", "2"],
    ["--schedule", "guided"],
    ["--emit-flow", "a", "--flow-in", "b"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage error" in capsys.readouterr().err


def test_single_endpoint_run(capsys):
    rc = main(["--scenario", "tc1", "--np", "20", "--scale", "0.1", "--sigma2", "0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == {"reached_boundary": 20}


def test_timeseries_run_writes_files(tmp_path, capsys):
    rc = main(["--scenario", "tc2", "--np", "50", "--scale", "0.01", "--ts-count", "3",
               "--protocol", "consolidated", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "timeseries.dat").exists() and (tmp_path / "endpoint.dat").exists()


def test_flow_roundtrip_via_cli(tmp_path, capsys):
    flow = tmp_path / "flow.npz"
    assert main(["--scenario", "tc1", "--scale", "0.1", "--emit-flow", str(flow)]) == 0
    capsys.readouterr()
    assert main(["--scenario", "tc1", "--scale", "0.1", "--np", "5", "--flow-in", str(flow)]) == 0
    assert json.loads(capsys.readouterr().out)["counters"]["particles_processed"] == 5


def test_matrix_text_and_validation():
    m = BenchMatrix.from_text("np = 10, 100\nthreads = 1,2\nschedule = static, dynamic\nreps = 2\n")
    assert m.np == [10, 100] and m.schedule == ["static_balanced", "dynamic"]
    assert len(list(m.cells())) == 8
    with pytest.raises(ConfigError):
        BenchMatrix.from_text("colour = red\n")
    with pytest.raises(ConfigError):
        BenchMatrix(reps=0)


def test_single_cell_bench(tmp_path):
    m = BenchMatrix(np=[50], threads=[1], schedule=["dynamic"], scale=0.1, reps=1, warmup=0)
    rows = run_bench(m, tmp_path / "bench.csv")
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    back = read_bench_csv(tmp_path / "bench.csv")
    assert back[0]["speedup"] == 1.0
    text = (tmp_path / "bench.csv").read_text()
    assert "# reference" in text
    report = emit_speedup_report(tmp_path / "bench.csv", tmp_path / "r.md")
    assert report.count("### ") == 4
    assert "absent" in report


def test_ratios():
    base = dict(scenario="tc1", mode="endpoint", np=10, chunk=1, protocol="parallel_exclusive",
                sigma2=2.5, ts_count=5, refine=1)
    rows = [dict(base, threads=1, schedule="dynamic", rep_median_s=4.0),
            dict(base, threads=2, schedule="dynamic", rep_median_s=2.0),
            dict(base, threads=1, schedule="static_balanced", rep_median_s=4.0),
            dict(base, threads=2, schedule="static_balanced", rep_median_s=2.5)]
    fill_ratios(rows)
    assert rows[1]["speedup"] == 2.0
    assert rows[1]["ratio_dyn_sta"] == pytest.approx(0.8)
