"""Command-line entry point and benchmark harness.

Single run::

    ptrack --scenario tc1 --mode endpoint --np 10000 --threads 4 --schedule dynamic --sigma2 2.5

Sweep::

    ptrack --bench matrix.cfg --reps 3 --out-dir results/

A matrix file holds ``key = comma-separated-values`` lines; every
combination of the listed values is one cell. Keys: scenario, mode, np,
threads, schedule, chunk, protocol, sigma2, ts_count, refine, scale, seed,
reps, warmup.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import statistics
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .driver import ConfigError, SimulationConfig, config_from_mapping, parse_config_text, run_simulation
from .flow import load_snapshot, save_snapshot
from .scenarios import build_tc1, build_tc2
from .scheduler import ScheduleSpec
from .tracking import WeakSinkPolicy

logger = logging.getLogger(__name__)

CSV_VERSION = 1
CSV_HEADER = ["scenario", "mode", "np", "threads", "schedule", "chunk", "protocol", "sigma2",
              "ts_count", "refine", "rep_median_s", "speedup", "ratio_dyn_sta", "ratio_refined_base"]
# published single-machine reference points (8 threads, Np >= 1e5, sigma2 = 2.5)
REFERENCE_POINTS = {"static_T1_over_T8": 5.09, "dynamic_T1_over_T8": 6.63}

SCHEDULE_NAMES = {"static": "static_balanced", "static_balanced": "static_balanced", "dynamic": "dynamic"}
PROTOCOL_NAMES = {"critical": "critical_single", "critical_single": "critical_single",
                  "consolidated": "consolidated", "parallel": "parallel_exclusive",
                  "parallel_exclusive": "parallel_exclusive"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptrack", description="Parallel semi-analytical particle tracking.")
    p.add_argument("--scenario", choices=("tc1", "tc2"), default="tc1")
    p.add_argument("--mode", choices=("endpoint", "timeseries", "pathline"))
    p.add_argument("--np", type=_positive_int, default=1000, dest="n_particles")
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--schedule", choices=sorted(SCHEDULE_NAMES), default="dynamic")
    p.add_argument("--chunk", type=_positive_int, default=1)
    p.add_argument("--protocol", choices=sorted(PROTOCOL_NAMES))
    p.add_argument("--ts-count", type=_positive_int)
    p.add_argument("--t-stop", type=float)
    p.add_argument("--sigma2", type=float, default=2.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--refine", type=_positive_int, default=1)
    p.add_argument("--weak-sink", choices=("pass", "stop"), default="pass")
    p.add_argument("--porosity", type=float, default=1.0)
    p.add_argument("--out-dir")
    p.add_argument("--config", help="key = value file; explicit flags win")
    p.add_argument("--bench", metavar="MATRIX", help="run a benchmark sweep")
    p.add_argument("--reps", type=_positive_int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--report", help="write the markdown speedup report here (bench mode)")
    p.add_argument("--emit-flow", metavar="PATH", help="write the solved flow snapshot and exit")
    p.add_argument("--flow-in", metavar="PATH", help="use a saved flow snapshot instead of solving")
    p.add_argument("--oversubscribe", action="store_true", help="allow more threads than cores")
    p.add_argument("--paper-scale", action="store_true", help="bench at full scale (slow)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


@dataclass
class BenchMatrix:
    scenario: list = field(default_factory=lambda: ["tc1"])
    mode: list = field(default_factory=lambda: ["endpoint"])
    np: list = field(default_factory=lambda: [1000, 10000, 100000, 1000000])
    threads: list = field(default_factory=lambda: [1, 2, 4, 8])
    schedule: list = field(default_factory=lambda: ["static_balanced", "dynamic"])
    chunk: list = field(default_factory=lambda: [1])
    protocol: list = field(default_factory=lambda: ["parallel_exclusive"])
    sigma2: list = field(default_factory=lambda: [2.5])
    ts_count: list = field(default_factory=lambda: [5])
    refine: list = field(default_factory=lambda: [1])
    scale: float = 0.2
    seed: int = 0
    reps: int = 3
    warmup: int = 1
    oversubscribe: bool = False

    _AXES = ("scenario", "mode", "np", "threads", "schedule", "chunk", "protocol", "sigma2",
             "ts_count", "refine")

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if any(int(t) < 1 for t in self.threads):
            raise ConfigError("worker counts must be >= 1")
        self.schedule = [SCHEDULE_NAMES[s] for s in self.schedule]
        self.protocol = [PROTOCOL_NAMES[p] for p in self.protocol]

    def cells(self):
        for combo in itertools.product(*(getattr(self, a) for a in self._AXES)):
            cell = dict(zip(self._AXES, combo))
            # endpoint runs write no timeseries, so the protocol axis collapses
            if cell["mode"] == "endpoint" and cell["protocol"] != self.protocol[0]:
                continue
            if cell["scenario"] == "tc1" and cell["refine"] != self.refine[0]:
                continue
            if cell["scenario"] == "tc2" and cell["sigma2"] != self.sigma2[0]:
                continue
            yield cell

    @classmethod
    def from_text(cls, text: str) -> "BenchMatrix":
        raw = parse_config_text(text)
        kw = {}
        conv = {"np": int, "threads": int, "chunk": int, "ts_count": int, "refine": int, "sigma2": float}
        for key, value in raw.items():
            vals = [v.strip() for v in value.split(",") if v.strip()]
            if key in cls._AXES:
                kw[key] = [conv.get(key, str)(float(v) if conv.get(key) is int else v) for v in vals]
            elif key in ("reps", "warmup", "seed"):
                kw[key] = int(vals[0])
            elif key == "scale":
                kw[key] = float(vals[0])
            elif key == "oversubscribe":
                kw[key] = vals[0].lower() in ("1", "true", "yes")
            else:
                raise ConfigError(f"unknown matrix key {key!r}")
        return cls(**kw)


def _scenario_flow(args_like: dict, cache: dict | None = None):
    key = (args_like["scenario"], args_like.get("sigma2"), args_like.get("refine"), args_like.get("scale"),
           args_like.get("seed"), args_like.get("porosity", 1.0))
    if cache is not None and key in cache:
        return cache[key]
    if args_like["scenario"] == "tc1":
        spec, snap = build_tc1(args_like["sigma2"], 0, args_like["seed"], args_like["scale"],
                               porosity=args_like.get("porosity", 1.0))
    else:
        spec, snap = build_tc2(0, args_like.get("ts_count", 5), args_like["refine"], args_like["scale"],
                               porosity=args_like.get("porosity", 1.0))
    if cache is not None:
        cache[key] = (spec, snap)
    return spec, snap


def _scenario_release(scenario: str, n: int, spec):
    # rebuild the release plan for n particles without re-solving the flow
    from .scenarios import _split
    if scenario == "tc1":
        stage = spec.release[0]
        return [type(stage)(stage.time, n, stage.region, stage.group)]
    stages = spec.release
    return [type(s)(s.time, c, s.region, s.group) for s, c in zip(stages, _split(n, len(stages)))]


def make_config(scenario: str, spec, n: int, mode: str | None, threads: int, schedule: str, chunk: int,
                protocol: str | None, ts_count: int | None, t_stop: float | None, weak: str,
                out_dir, oversubscribe=False) -> SimulationConfig:
    mode = mode or spec.defaults["mode"]
    if mode == "endpoint" and protocol not in (None,):
        raise UsageError(f"--protocol {protocol} has no effect in endpoint mode")
    if mode == "pathline" and protocol not in (None, "parallel", "parallel_exclusive"):
        raise UsageError("pathline mode supports only the parallel_exclusive protocol")
    ts_count = ts_count or spec.defaults.get("ts_count")
    if mode == "timeseries" and t_stop is None:
        t_stop = spec.defaults.get("t_stop") or spec.defaults.get("ts_horizon")
    tag = {"scenario": scenario, **{k: v for k, v in spec.params.items() if k != "n_particles"}, "np": n}
    return SimulationConfig(
        mode=mode, t_stop=t_stop, ts_count=ts_count if mode == "timeseries" else None,
        schedule=ScheduleSpec(SCHEDULE_NAMES[schedule], chunk), workers=threads,
        weak_sink_policy=WeakSinkPolicy.STOP if weak == "stop" else WeakSinkPolicy.PASS_THROUGH,
        protocol=PROTOCOL_NAMES.get(protocol or "parallel_exclusive"),
        release=_scenario_release(scenario, n, spec), out_dir=str(out_dir) if out_dir else None,
        oversubscribe=oversubscribe, tag=tag)


def parse_args(argv=None):
    """Return ``("run", namespace)`` or ``("bench", namespace)``; raises UsageError."""
    args = build_parser().parse_args(argv)
    if args.bench:
        return "bench", args
    if args.mode == "endpoint" and args.protocol:
        raise UsageError(f"--protocol {args.protocol} conflicts with --mode endpoint")
    if args.mode == "pathline" and args.protocol not in (None, "parallel", "parallel_exclusive"):
        raise UsageError("pathline mode supports only --protocol parallel_exclusive")
    if args.scale is not None and not 0 < args.scale <= 1:
        raise UsageError("--scale must lie in (0, 1]")
    if not 0 <= args.sigma2 <= 5:
        raise UsageError("--sigma2 must lie in [0, 5]")
    if args.emit_flow and args.flow_in:
        raise UsageError("--emit-flow and --flow-in are exclusive")
    return "run", args


def run_single(args) -> dict:
    scale = args.scale if args.scale is not None else (0.2 if args.scenario == "tc1" else 1.0)
    spec, snap = _scenario_flow({"scenario": args.scenario, "sigma2": args.sigma2, "refine": args.refine,
                                 "scale": scale, "seed": args.seed, "porosity": args.porosity,
                                 "ts_count": args.ts_count or 5})
    if args.flow_in:
        snap = load_snapshot(args.flow_in)
        if snap.grid.shape != spec.grid.shape:
            raise ConfigError(f"{args.flow_in}: grid {snap.grid.shape} does not match the scenario grid")
    if args.emit_flow:
        save_snapshot(snap, args.emit_flow)
        return {"flow_written": args.emit_flow}
    config = make_config(args.scenario, spec, args.n_particles, args.mode, args.threads, args.schedule,
                         args.chunk, args.protocol, args.ts_count, args.t_stop, args.weak_sink,
                         args.out_dir, args.oversubscribe)
    if args.config:
        config = config_from_mapping(parse_config_text(Path(args.config).read_text()), config)
    if config.mode != "endpoint" and not config.out_dir:
        raise UsageError(f"--mode {config.mode} needs --out-dir")
    summary = run_simulation(config, spec.flow_store(snap))
    return summary.as_dict()


# -- benchmarking ----------------------------------------------------------------


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def run_bench(matrix: BenchMatrix, out_csv, work_dir=None) -> list[dict]:
    """Run every matrix cell (warmups then timed repetitions) and write the CSV."""
    cache = {}
    rows = []
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        for n, cell in enumerate(matrix.cells()):
            row = dict(cell)
            try:
                flow_key = {"scenario": cell["scenario"], "sigma2": cell["sigma2"], "refine": cell["refine"],
                            "scale": matrix.scale if cell["scenario"] == "tc1" else 1.0, "seed": matrix.seed,
                            "ts_count": cell["ts_count"]}
                spec, snap = _scenario_flow(flow_key, cache)
                store = spec.flow_store(snap)
                out_dir = Path(tmp) / f"cell{n}"
                config = make_config(cell["scenario"], spec, cell["np"], cell["mode"], cell["threads"],
                                     cell["schedule"], cell["chunk"],
                                     None if cell["mode"] == "endpoint" else cell["protocol"],
                                     cell["ts_count"], None, "pass",
                                     out_dir if cell["mode"] != "endpoint" else None, matrix.oversubscribe)
                config.write_endpoints = False
                times = []
                for rep in range(matrix.warmup + matrix.reps):
                    s = run_simulation(config, store)
                    if rep >= matrix.warmup:
                        times.append(s.elapsed)
                row["rep_median_s"] = statistics.median(times)
                row["status"] = "ok"
            except Exception as exc:  # keep sweeping
                logger.error("bench cell %s failed: %s", cell, exc)
                row["rep_median_s"] = math.nan
                row["status"] = f"failed: {exc}"
            rows.append(row)
            logger.info("%s -> %s", cell, _fmt(row["rep_median_s"]))
    fill_ratios(rows)
    write_bench_csv(rows, out_csv, matrix)
    return rows


def _key(row, drop):
    return tuple((k, row[k]) for k in BenchMatrix._AXES if k not in drop)


def fill_ratios(rows: list[dict]) -> None:
    """Speedup vs the matched 1-worker row and the dyn/sta and refined/base ratios."""
    by = {_key(r, ()): r for r in rows}
    for r in rows:
        t = r["rep_median_s"]
        base = by.get(_key({**r, "threads": 1}, ()))
        r["speedup"] = base["rep_median_s"] / t if base and t and not math.isnan(t) else math.nan
        if r["threads"] == 1 and not math.isnan(t):
            r["speedup"] = 1.0
        dyn = by.get(_key({**r, "schedule": "dynamic"}, ()))
        sta = by.get(_key({**r, "schedule": "static_balanced"}, ()))
        r["ratio_dyn_sta"] = (dyn["rep_median_s"] / sta["rep_median_s"]
                              if dyn and sta and dyn is not sta else math.nan)
        refined = [x for x in rows if _key(x, ("refine",)) == _key(r, ("refine",)) and x["refine"] > 1]
        basec = by.get(_key({**r, "refine": 1}, ()))
        r["ratio_refined_base"] = (refined[0]["rep_median_s"] / basec["rep_median_s"]
                                   if refined and basec and r["scenario"] == "tc2" else math.nan)


def write_bench_csv(rows, out_csv, matrix: BenchMatrix | None = None) -> None:
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        fh.write(f"# ptrack bench csv v{CSV_VERSION}\n")
        for k, v in REFERENCE_POINTS.items():
            fh.write(f"# reference {k} = {v} (8-core desktop; not expected on other hardware)\n")
        if matrix is not None:
            fh.write(f"# scale = {matrix.scale}; reps = {matrix.reps}; warmup = {matrix.warmup}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in CSV_HEADER])


def read_bench_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        row = {}
        for k, v in rec.items():
            if k in ("np", "threads", "chunk", "ts_count", "refine"):
                row[k] = int(v)
            elif k in ("sigma2", "rep_median_s", "speedup", "ratio_dyn_sta", "ratio_refined_base"):
                row[k] = float(v) if v else math.nan
            else:
                row[k] = v
        out.append(row)
    return out


def _table(title, rows, row_key, col_key, value, row_label, col_label) -> str:
    rvals = sorted({row_key(r) for r in rows})
    cvals = sorted({col_key(r) for r in rows})
    cells = {(row_key(r), col_key(r)): value(r) for r in rows}
    out = [f"### {title}", "", f"| {row_label} \\ {col_label} | " + " | ".join(str(c) for c in cvals) + " |",
           "|---" * (len(cvals) + 1) + "|"]
    for rv in rvals:
        vals = []
        for cv in cvals:
            v = cells.get((rv, cv))
            vals.append("absent" if v is None or math.isnan(v) else f"{v:.3f}")
        out.append(f"| {rv} | " + " | ".join(vals) + " |")
    return "\n".join(out) + "\n"


def emit_speedup_report(csv_path, report_path) -> str:
    """Markdown tables derived only from the CSV."""
    rows = read_bench_csv(csv_path)
    parts = ["# Speedup report", ""]
    tc1 = [r for r in rows if r["scenario"] == "tc1" and r["mode"] == "endpoint"]
    for sched in sorted({r["schedule"] for r in tc1}):
        sub = [r for r in tc1 if r["schedule"] == sched]
        parts.append(_table(f"Speedup vs particles, {sched}", sub, lambda r: r["np"], lambda r: r["threads"],
                            lambda r: r["speedup"], "Np", "workers"))
    if not tc1:
        parts.append("### Speedup vs particles\n\nabsent\n")
    dyn = [r for r in tc1 if r["schedule"] == "dynamic"]
    parts.append(_table("T_dyn / T_sta vs sigma2", dyn, lambda r: r["sigma2"], lambda r: r["threads"],
                        lambda r: r["ratio_dyn_sta"], "sigma2", "workers") if dyn
                 else "### T_dyn / T_sta vs sigma2\n\nabsent\n")
    ts = [r for r in rows if r["mode"] == "timeseries"]
    parts.append(_table("Speedup by output protocol", ts, lambda r: (r["protocol"], r["ts_count"]),
                        lambda r: r["threads"], lambda r: r["speedup"], "protocol, ts", "workers") if ts
                 else "### Speedup by output protocol\n\nabsent\n")
    ref = [r for r in rows if r["scenario"] == "tc2" and r["refine"] > 1]
    parts.append(_table("T_refined / T_base vs particles", ref, lambda r: r["np"], lambda r: r["threads"],
                        lambda r: r["ratio_refined_base"], "Np", "workers") if ref
                 else "### T_refined / T_base vs particles\n\nabsent\n")
    text = "\n".join(parts)
    Path(report_path).write_text(text)
    return text


def main(argv=None) -> int:
    try:
        kind, args = parse_args(argv)
    except UsageError as exc:
        print(f"ptrack: usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if kind == "bench":
            matrix = BenchMatrix.from_text(Path(args.bench).read_text())
            if args.reps:
                matrix.reps = args.reps
            if args.warmup is not None:
                matrix.warmup = args.warmup
            if args.oversubscribe:
                matrix.oversubscribe = True
            if args.paper_scale:
                logger.warning("paper-scale bench: expect hours of runtime")
                matrix.scale = 1.0
            out_dir = Path(args.out_dir or ".")
            csv_path = out_dir / "bench.csv"
            run_bench(matrix, csv_path)
            emit_speedup_report(csv_path, args.report or out_dir / "speedup_report.md")
            print(csv_path)
        else:
            print(json.dumps(run_single(args), indent=2, default=str))
    except UsageError as exc:
        print(f"ptrack: usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"ptrack: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"ptrack: run failed: {exc}", file=sys.stderr)
        return 1
    return 0

