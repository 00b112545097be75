import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icegraph.evaluation import (
    BenchmarkRow, MapGrid, SweepRow, aggregate, area_mean, evaluate_predictions, instructor_sweep, median_time,
    pearson_r, per_year_rmse, read_grid, read_table, render_map, rmse, trend_slope, volume_km3, write_grid,
    write_table,
)
from icegraph.mesh import Rectangle, generate_initial_mesh, mesh_to_graph
from icegraph.models import GraphSample, SampleMeta
from icegraph.ssa import prepare_glacier


def _two_pass_r(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_metric_examples():
    t = np.array([1.0, 4.0, 2.0, 8.0])
    assert rmse(t, t) == 0.0 and pearson_r(t, t) == pytest.approx(1.0, abs=1e-15)
    assert rmse(t + 3.5, t) == pytest.approx(3.5, abs=1e-15)
    assert pearson_r(t + 3.5, t) == pytest.approx(1.0, abs=1e-15)
    assert math.isnan(pearson_r(t, np.full(4, 2.0)))
    with pytest.raises(ValueError):
        pearson_r([1.0], [1.0])
    with pytest.raises(ValueError):
        rmse([1.0, 2.0], [1.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_match_direct_formulas(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=10), rng.normal(size=10)
    assert abs(rmse(a, b) - math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / 10)) < 1e-12
    assert abs(pearson_r(a, b) - _two_pass_r(list(a), list(b))) < 1e-12
    assert rmse(a, b) >= 0 and -1 <= pearson_r(a, b) <= 1


def test_per_year_rmse_cases():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(240, 7))
    assert np.array_equal(per_year_rmse(truth, truth), np.zeros(20))
    pred = truth.copy()
    pred[12:24] += 2.0
    series = per_year_rmse(pred, truth)
    assert series[1] == pytest.approx(2.0) and np.count_nonzero(series) == 1
    with pytest.raises(ValueError):
        per_year_rmse(pred[:-1], truth)
    with pytest.raises(ValueError):
        per_year_rmse(pred[:-1], truth[:-1])


def test_pooled_rmse_is_weighted_combination_of_years():
    rng = np.random.default_rng(1)
    pred, truth = rng.normal(size=(240, 5)), rng.normal(size=(240, 5))
    yearly = per_year_rmse(pred, truth)
    # every year holds the same 12 * N node-months, so the weights are equal
    assert rmse(pred, truth) == pytest.approx(math.sqrt(np.mean(yearly ** 2)), rel=1e-12)


@pytest.fixture(scope="module")
def square():
    return generate_initial_mesh(Rectangle(0.0, 100e3, 0.0, 100e3), 10e3, seed=0)


def test_uniform_thickness_volume(square):
    assert volume_km3(square, np.full(square.num_nodes, 1000.0)) == pytest.approx(10_000.0, rel=1e-12)
    assert area_mean(square, np.full(square.num_nodes, 7.0)) == pytest.approx(7.0, rel=1e-14)


def test_volume_is_refinement_consistent():
    dom = Rectangle(0.0, 100e3, 0.0, 100e3)

    def H(xy):
        return 1500.0 + 600.0 * np.sin(np.pi * xy[:, 0] / 100e3) * np.cos(np.pi * xy[:, 1] / 200e3)
    coarse = generate_initial_mesh(dom, 10e3, seed=0)
    fine = generate_initial_mesh(dom, 5e3, seed=0)
    vc, vf = volume_km3(coarse, H(coarse.node_xy)), volume_km3(fine, H(fine.node_xy))
    assert abs(vc - vf) / vf < 0.005


def test_render_map_cases(square):
    const = render_map(square, np.full((24, square.num_nodes), 3.0), (0.0, 0.0), 5e3, 21, 21)
    assert np.allclose(const.values, 3.0, atol=1e-12)
    outside = render_map(square, np.ones(square.num_nodes), (-20e3, 0.0), 5e3, 5, 2)
    assert np.isnan(outside.values[0, 0]) and outside.values[0, 4] == pytest.approx(1.0)
    # a one-row grid through the first nodes returns their values
    rng = np.random.default_rng(0)
    field = rng.normal(size=square.num_nodes)
    row = np.flatnonzero(square.node_xy[:, 1] == 0.0)
    row = row[np.argsort(square.node_xy[row, 0])]
    xs = square.node_xy[row, 0]
    spacing = xs[1] - xs[0]
    grid = render_map(square, field, (xs[0], 0.0), spacing, len(xs), 1)
    assert np.allclose(grid.values[0], field[row], atol=1e-9)
    series = rng.normal(size=(12, square.num_nodes))
    diff = render_map(square, series - series, (0.0, 0.0), 10e3, 11, 11)
    assert np.all(diff.values == 0)


def test_grid_round_trip(tmp_path):
    g = MapGrid((1.5, -2.0), 250.0, np.array([[1.0, np.nan, 3.0], [4.0, 5.0, 6.25]]))
    write_grid(tmp_path / "g.txt", g)
    back = read_grid(tmp_path / "g.txt")
    assert back.origin == g.origin and back.spacing == g.spacing
    assert np.array_equal(back.values, g.values, equal_nan=True)
    assert (tmp_path / "g.txt").read_text().startswith("# nx 3 ny 2 origin")


def test_evaluate_predictions_pools_cells():
    mesh = generate_initial_mesh(Rectangle(0.0, 40e3, 0.0, 40e3), 10e3)
    topo = mesh_to_graph(mesh)
    n = topo.num_nodes
    rng = np.random.default_rng(0)
    samples, preds = [], []
    for r in (0.0, 20.0):
        for k in range(24):
            inputs = np.column_stack([mesh.node_xy, np.full(n, k), np.full(n, r)])
            t = rng.normal(size=(n, 3)) * [100, 100, 500] + [0, 0, 1000]
            samples.append(GraphSample(topo, inputs, t, SampleMeta(10e3, r, k)))
            preds.append(t + np.array([3.0, 4.0, 2.0]) * (r == 0.0))
    rows = evaluate_predictions("gcn", samples, preds)
    by = {(row.rate, row.variable): row for row in rows}
    assert len(rows) == 8
    assert by[0.0, "H"].rmse == pytest.approx(2.0) and len(by[0.0, "H"].yearly_rmse) == 2
    assert by[20.0, "speed"].rmse == 0.0 and by[20.0, "speed"].pearson_r == pytest.approx(1.0)
    agg = aggregate(rows, rates=(0.0, 20.0))
    assert agg["gcn", 10e3, "H"][0] == pytest.approx(1.0)


def test_trend_slope_sign():
    rows = [SweepRow("x", r, 24, 1000.0 - 2.0 * r, 300.0 + r) for r in (0.0, 20.0, 40.0, 60.0)]
    assert trend_slope(rows, "volume_km3") == pytest.approx(-2.0)
    assert trend_slope(rows, "mean_speed") == pytest.approx(1.0)


def test_instructor_sweep_volume_falls_with_melt():
    mesh, state = prepare_glacier(20e3)
    rows = instructor_sweep(mesh, state, (0.0, 60.0), 24, (12, 24))
    at24 = {row.rate: row for row in rows if row.month == 24}
    assert len(rows) == 4
    assert at24[60.0].volume_km3 < at24[0.0].volume_km3
    assert at24[60.0].mean_speed >= at24[0.0].mean_speed


def test_median_time_is_stable():
    def work():
        np.linalg.eigvalsh(np.eye(150) + 0.01)
    a, b = median_time(work, repeats=5), median_time(work, repeats=5)
    assert abs(a - b) / max(a, b) < 0.25
    calls = []
    median_time(lambda: calls.append(time.perf_counter()), repeats=3, warmup=2)
    assert len(calls) == 5
    with pytest.raises(ValueError):
        median_time(work, repeats=0)


def test_benchmark_row_and_table_round_trip(tmp_path):
    row = BenchmarkRow(20e3, 42, "gcn", 3.0, 0.5)
    assert row.speedup == 6.0
    write_table(tmp_path / "t.txt", BenchmarkRow.header, [row.as_row()])
    header, rows = read_table(tmp_path / "t.txt")
    assert header == list(BenchmarkRow.header)
    assert rows == [["20000", "42", "gcn", "3", "0.5", "6"]]
