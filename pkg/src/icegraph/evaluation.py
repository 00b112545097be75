"""Fidelity metrics, map rasters, melt-rate sensitivity sweeps and timing.

Velocity errors are measured on the speed magnitude ``sqrt(u^2 + v^2)``; the
correlation coefficient pools every (node, month) pair of a cell.
"""

from __future__ import annotations

import dataclasses
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .mesh import TriMesh, interpolate_node_field
from .models import EmulatorModel, GraphSample, SampleMeta, TEST_RATES, predict_many
from .ssa import GlacierState, PhysicsParams, ScenarioConfig, run_transient

__all__ = [
    "rmse", "pearson_r", "speed", "per_year_rmse", "MapGrid", "render_map", "write_grid", "read_grid",
    "volume_km3", "area_mean", "SweepRow", "instructor_sweep", "emulator_sweep", "trend_slope", "MetricRow",
    "evaluate_predictions", "aggregate", "median_time", "BenchmarkRow", "write_table", "read_table", "sweep_samples",
]


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float).ravel(), np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError(f"rmse needs equal non-empty lengths, got {pred.size} and {truth.size}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def pearson_r(pred, truth) -> float:
    """Pearson correlation; NaN (missing) when either side has zero variance."""
    pred, truth = np.asarray(pred, dtype=float).ravel(), np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape or pred.size < 2:
        raise ValueError(f"pearson_r needs equal lengths >= 2, got {pred.size} and {truth.size}")
    dp, dt = pred - pred.mean(), truth - truth.mean()
    den = math.sqrt(float(np.dot(dp, dp)) * float(np.dot(dt, dt)))
    if den == 0.0:
        return math.nan
    return float(np.clip(np.dot(dp, dt) / den, -1.0, 1.0))


def speed(uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv)
    return np.hypot(uv[..., 0], uv[..., 1])


def per_year_rmse(pred: np.ndarray, truth: np.ndarray, months_per_year: int = 12) -> np.ndarray:
    """RMSE pooled over the months and nodes of each year; inputs are ``(months, nodes)``."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"trajectories must be aligned (months, nodes) arrays: {pred.shape} vs {truth.shape}")
    if pred.shape[0] % months_per_year:
        raise ValueError(f"{pred.shape[0]} months is not a whole number of years")
    sq = ((pred - truth) ** 2).reshape(-1, months_per_year * pred.shape[1])
    return np.sqrt(sq.mean(axis=1))


# -- maps ---------------------------------------------------------------------

@dataclass(frozen=True)
class MapGrid:
    origin: tuple[float, float]
    spacing: float
    values: np.ndarray  # (ny, nx), NaN outside the mesh

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def points(self) -> np.ndarray:
        ny, nx = self.values.shape
        gx, gy = np.meshgrid(self.origin[0] + self.spacing * np.arange(nx), self.origin[1] + self.spacing * np.arange(ny))
        return np.column_stack([gx.ravel(), gy.ravel()])


def render_map(mesh: TriMesh, field, origin: tuple[float, float], spacing: float, nx: int, ny: int) -> MapGrid:
    """Time-mean of a ``(months, nodes)`` series (or a single ``(nodes,)`` field) interpolated onto a grid."""
    f = np.asarray(field, dtype=float)
    mean = f.mean(axis=0) if f.ndim == 2 else f
    gx, gy = np.meshgrid(origin[0] + spacing * np.arange(nx), origin[1] + spacing * np.arange(ny))
    vals = interpolate_node_field(mesh, mean, np.column_stack([gx.ravel(), gy.ravel()]))
    return MapGrid((float(origin[0]), float(origin[1])), float(spacing), vals.reshape(ny, nx))


def write_grid(path: str | Path, grid: MapGrid) -> None:
    ny, nx = grid.shape
    header = f"nx {nx} ny {ny} origin {grid.origin[0]!r} {grid.origin[1]!r} spacing {grid.spacing!r}"
    np.savetxt(path, grid.values, header=header, comments="# ", fmt="%.10g")


def read_grid(path: str | Path) -> MapGrid:
    with open(path) as f:
        p = f.readline().lstrip("# ").split()
    values = np.loadtxt(path, ndmin=2)
    if values.shape != (int(p[3]), int(p[1])):
        raise ValueError(f"{path}: grid body {values.shape} does not match header")
    return MapGrid((float(p[5]), float(p[6])), float(p[8]), values)


# -- sensitivity --------------------------------------------------------------

def volume_km3(mesh: TriMesh, H: np.ndarray) -> float:
    """Sum over elements of mean nodal thickness times area, in km^3."""
    return float(np.dot(mesh.areas, np.asarray(H)[mesh.triangles].mean(axis=1)) / 1e9)


def area_mean(mesh: TriMesh, values: np.ndarray) -> float:
    """Mean with nodal weights of one third of the incident triangle areas."""
    w = mesh.nodal_areas
    return float(np.dot(w, values) / w.sum())


@dataclass(frozen=True)
class SweepRow:
    engine: str
    rate: float
    month: int
    volume_km3: float
    mean_speed: float


def instructor_sweep(mesh: TriMesh, initial: GlacierState, rates: Iterable[float], months: int,
                     sample_months: Sequence[int], params: PhysicsParams = PhysicsParams()) -> list[SweepRow]:
    """Run the instructor for each rate and record volume and mean speed at ``sample_months`` (1-based)."""
    rows = []
    for r in rates:
        states = run_transient(ScenarioConfig(melt_rate=float(r), duration=months / 12.0), initial, mesh, params)
        for m in sample_months:
            st = states[m - 1]
            rows.append(SweepRow("instructor", float(r), m, volume_km3(mesh, st.H), area_mean(mesh, st.speed)))
    return rows


def sweep_samples(mesh: TriMesh, topology, rates: Iterable[float], months: Sequence[int], m0: float) -> list[GraphSample]:
    """Input-only samples (targets zero) for emulator inference; ``months`` are 0-based month indices."""
    n = mesh.num_nodes
    out = []
    for r in rates:
        for k in months:
            inputs = np.column_stack([mesh.node_xy, np.full(n, float(k)), np.full(n, float(r))])
            out.append(GraphSample(topology, inputs, np.zeros((n, 3)), SampleMeta(m0, float(r), int(k)), mesh))
    return out


def emulator_sweep(model: EmulatorModel, mesh: TriMesh, topology, rates: Iterable[float],
                   sample_months: Sequence[int], m0: float = 0.0) -> list[SweepRow]:
    """Emulator analogue of :func:`instructor_sweep` (month ``m`` is sample index ``m - 1``)."""
    rates = list(rates)
    samples = sweep_samples(mesh, topology, rates, [m - 1 for m in sample_months], m0)
    preds = predict_many(model, samples)
    return [SweepRow(model.architecture, s.meta.rate, s.meta.month + 1, volume_km3(mesh, p[:, 2]),
                     area_mean(mesh, speed(p[:, :2]))) for s, p in zip(samples, preds)]


def trend_slope(rows: Sequence[SweepRow], attr: str) -> float:
    """Least-squares slope of ``attr`` against melt rate."""
    r = np.array([row.rate for row in rows])
    y = np.array([getattr(row, attr) for row in rows])
    return float(np.polyfit(r, y, 1)[0])


# -- metric tables ------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    architecture: str
    m0: float
    rate: float
    variable: str
    rmse: float
    pearson_r: float
    yearly_rmse: tuple[float, ...]


def evaluate_predictions(architecture: str, samples: Sequence[GraphSample], preds: Sequence[np.ndarray],
                         months_per_year: int = 12) -> list[MetricRow]:
    """One row per (m0, rate, variable) cell, pooling every node and month of the cell."""
    cells: dict[tuple[float, float], list[int]] = {}
    for k, s in enumerate(samples):
        cells.setdefault((s.meta.m0, s.meta.rate), []).append(k)
    rows = []
    for (m0, rate), idx in cells.items():
        idx = sorted(idx, key=lambda k: samples[k].meta.month)
        truth = np.stack([samples[k].targets for k in idx])
        pred = np.stack([preds[k] for k in idx])
        series = {"H": (pred[..., 2], truth[..., 2]), "speed": (speed(pred[..., :2]), speed(truth[..., :2])),
                  "u": (pred[..., 0], truth[..., 0]), "v": (pred[..., 1], truth[..., 1])}
        for var, (p, t) in series.items():
            yearly = tuple(per_year_rmse(p, t, months_per_year)) if len(idx) % months_per_year == 0 else ()
            rows.append(MetricRow(architecture, m0, rate, var, rmse(p, t), pearson_r(p, t), yearly))
    return rows


def aggregate(rows: Sequence[MetricRow], rates: Sequence[float] = TEST_RATES) -> dict[tuple[str, float, str], tuple[float, float]]:
    """Mean RMSE and R over the given rates per (architecture, m0, variable)."""
    acc: dict[tuple[str, float, str], list[MetricRow]] = {}
    for row in rows:
        if any(math.isclose(row.rate, r) for r in rates):
            acc.setdefault((row.architecture, row.m0, row.variable), []).append(row)
    return {k: (float(np.mean([r.rmse for r in v])), float(np.mean([r.pearson_r for r in v]))) for k, v in acc.items()}


# -- timing -------------------------------------------------------------------

def median_time(fn: Callable[[], object], repeats: int = 3, warmup: int = 1) -> float:
    """Median wall-clock seconds of ``repeats`` calls after ``warmup`` discarded calls."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


@dataclass(frozen=True)
class BenchmarkRow:
    """Wall-clock seconds of one full sweep on one mesh, instructor against emulator inference."""

    m0: float
    nodes: int
    architecture: str
    instructor_seconds: float
    emulator_seconds: float

    @property
    def speedup(self) -> float:
        return self.instructor_seconds / self.emulator_seconds

    def as_row(self) -> tuple:
        return dataclasses.astuple(self) + (self.speedup,)

    header = ("m0", "nodes", "architecture", "instructor_seconds", "emulator_seconds", "speedup")


# -- text tables --------------------------------------------------------------

def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Tab-delimited table with a header line."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.10g}"
        if isinstance(v, (tuple, list)):
            return ",".join(cell(x) for x in v)
        return str(v)
    lines = ["\t".join(header)] + ["\t".join(cell(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    return lines[0].split("\t"), [line.split("\t") for line in lines[1:] if line]
