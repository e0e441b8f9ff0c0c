"""Bundled benchmark problems with their pinned grids and schedules.

These are the configurations the verification and acceptance suites run:
CONST1 (value identically 1), the OU bench with both constraints active,
its pure-stopping variant (control cost effectively infinite) and the
all-zero degenerate case.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .grid import Grid
from .model import ProblemSpec, SamplePlan, parse_config_text
from .solver import default_schedule

__all__ = ["Bench", "load_bench", "BENCH_NAMES"]

BENCH_NAMES = ("const1", "bench_ou", "bench_ou_purestop", "allzero")

# pinned desk-scale resolutions: hx = 0.02, ht = 2e-4 on the flagship benches
_SETTINGS = {
    "const1": dict(m=10.0, nx=1001, nt=1500, stages=6),
    "bench_ou": dict(m=6.0, nx=601, nt=2500, stages=10),
    "bench_ou_purestop": dict(m=6.0, nx=601, nt=2500, stages=8),
    "allzero": dict(m=4.0, nx=161, nt=250, stages=3),
}


@dataclass
class Bench:
    name: str
    spec: ProblemSpec
    plan: SamplePlan
    sim_defaults: dict
    grid: Grid
    schedule: list[tuple[float, float, float]]

    def grid_policy(self, m: float) -> Grid:
        if m != self.grid.m:
            raise ValueError(f"bench {self.name} is pinned to radius {self.grid.m}")
        return self.grid


def load_bench(name: str, coarse: bool = False) -> Bench:
    """Load a bundled bench.  coarse=True shrinks the grid and schedule for
    fast unit tests while keeping the same problem data."""
    if name not in BENCH_NAMES:
        raise ValueError(f"unknown bench {name!r}; choose from {BENCH_NAMES}")
    text = resources.files("ctrlstop.configs").joinpath(f"{name}.cfg").read_text()
    spec, plan, sim_defaults = parse_config_text(text, source=f"<bench {name}>")
    cfg = _SETTINGS[name]
    if coarse:
        nx = max(81, (cfg["nx"] - 1) // 4 + 1)
        nt = max(50, cfg["nt"] // 10)
        stages = min(cfg["stages"], 5)
    else:
        nx, nt, stages = cfg["nx"], cfg["nt"], cfg["stages"]
    grid = Grid(d=spec.d, m=cfg["m"], nx=nx, nt=nt, T=spec.T)
    schedule = default_schedule(stages, m=cfg["m"])
    return Bench(
        name=name,
        spec=spec,
        plan=plan,
        sim_defaults=sim_defaults,
        grid=grid,
        schedule=schedule,
    )
