"""Parallel semi-analytical particle tracking on structured groundwater flow models."""

from .driver import ReleaseStage, SimulationConfig, SimulationSummary, run_simulation
from .flow import FlowSnapshot, FlowStore, solve_steady
from .grid import Grid, build_structured
from .scenarios import build_tc1, build_tc2
from .scheduler import ScheduleSpec, run_particle_loop
from .tracking import Status, WeakSinkPolicy

__version__ = "0.1.0"

__all__ = [
    "FlowSnapshot", "FlowStore", "Grid", "ReleaseStage", "ScheduleSpec", "SimulationConfig",
    "SimulationSummary", "Status", "WeakSinkPolicy", "build_structured", "build_tc1", "build_tc2",
    "run_particle_loop", "run_simulation", "solve_steady",
]
