import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icegraph.autodiff import Tensor
from icegraph.mesh import Rectangle, generate_initial_mesh, mesh_to_graph
from icegraph.models import (
    ARCHITECTURES, GraphSample, GridSpec, NormalizationSpec, SampleMeta, TrainingError, build_model, evaluate_loss,
    load_model, predict, predict_many, save_model, split_dataset, train, union_topology,
)

DOMAIN = Rectangle(0.0, 40e3, 0.0, 20e3)


@pytest.fixture(scope="module")
def small():
    mesh = generate_initial_mesh(DOMAIN, 5e3, seed=1)
    return mesh, mesh_to_graph(mesh)


def make_samples(mesh, topo, rates=(0.0, 10.0, 20.0), months=3):
    """Smooth synthetic fields that depend on position, month and rate."""
    x, y = mesh.node_xy[:, 0] / 40e3, mesh.node_xy[:, 1] / 20e3
    out = []
    for r in rates:
        for k in range(months):
            inputs = np.column_stack([mesh.node_xy, np.full(len(x), float(k)), np.full(len(x), r)])
            u = 300 * x + 5 * r * x * y + 10 * k
            v = 50 * np.sin(np.pi * y)
            H = 800 - 400 * x - 3 * r * x - 2 * k
            out.append(GraphSample(topo, inputs, np.column_stack([u, v, H]), SampleMeta(5e3, r, k), mesh))
    return out


def norm_for(months=3):
    return NormalizationSpec.for_corpus(DOMAIN, months, 600.0, 800.0)


# -- construction ------------------------------------------------------------

def test_mlp_parameter_count():
    assert build_model("mlp").parameter_count == 4 * 128 + 128 + 4 * (128 * 128 + 128) + 128 * 3 + 3 == 67_075


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_builds_are_seed_deterministic(arch):
    a, b, c = build_model(arch, seed=3), build_model(arch, seed=3), build_model(arch, seed=4)
    assert np.array_equal(a.params.flat, b.params.flat)
    assert not np.array_equal(a.params.flat, c.params.flat)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_layer_stack_shape(arch):
    m = build_model(arch)
    hidden, head = m.layers[:-1], m.layers[-1]
    assert len(hidden) == 5 and all(s.out_features == 128 for s in hidden)
    assert hidden[0].in_features == 4 and head.out_features == 3
    assert not head.activation and all(s.activation for s in hidden)


def test_fcn_kernels_are_three_by_three():
    m = build_model("fcn")
    kernels = [v for k, v in m.params.arrays().items() if k.endswith(".W")]
    assert len(kernels) == 6
    assert all(k.ndim == 4 and k.shape[2:] == (3, 3) for k in kernels)


def test_gat_heads_only_on_last_hidden_layer():
    assert [s.heads for s in build_model("gat").layers] == [1, 1, 1, 1, 3, 1]


def test_unknown_architecture_is_rejected():
    with pytest.raises(ValueError, match="unknown architecture"):
        build_model("transformer")


# -- normalisation -----------------------------------------------------------

def test_normalization_endpoints_and_midpoint():
    n = norm_for()
    lo, hi = np.array(n.input_min), np.array(n.input_max)
    assert np.array_equal(n.normalize_inputs(lo[None]), -np.ones((1, 4)))
    assert np.allclose(n.normalize_inputs(hi[None]), 1.0, atol=1e-15)
    assert np.allclose(n.normalize_inputs(((lo + hi) / 2)[None]), 0.0, atol=1e-15)
    assert n.target_max[0] == pytest.approx(1.25 * 600.0)
    assert n.target_min[2] == 0.0 and n.target_max[2] == pytest.approx(1000.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalization_round_trip(seed):
    n = norm_for()
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1e5, 1e5, size=(20, 4))
    t = rng.uniform(-3e3, 3e3, size=(20, 3))
    assert np.max(np.abs(n.denormalize_inputs(n.normalize_inputs(a)) - a)) < 1e-12 * max(1.0, np.abs(a).max())
    assert np.max(np.abs(n.denormalize_targets(n.normalize_targets(t)) - t)) < 1e-12 * max(1.0, np.abs(t).max())


def test_out_of_range_values_are_logged_not_rejected(caplog):
    n = norm_for()
    with caplog.at_level(logging.DEBUG, logger="icegraph.models"):
        out = n.normalize_targets(np.array([[2000.0, 0.0, 0.0]]))
    assert out[0, 0] > 1.0
    assert "outside nominal bounds" in caplog.text


def test_normalization_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        NormalizationSpec((0.0,), (0.0,), (0.0,), (1.0,))


# -- splits ------------------------------------------------------------------

def test_full_scale_split_counts():
    rates = list(np.arange(0, 71, 2.0)) * (240 * 3)
    tr, va, te = split_dataset(rates)
    assert (len(rates), len(tr), len(va), len(te)) == (25_920, 20_160, 2_880, 2_880)


def test_desk_split_counts_and_partition():
    metas = [SampleMeta(20e3, float(r), k) for r in range(0, 71, 2) for k in range(24)]
    tr, va, te = split_dataset(metas)
    assert (len(tr), len(va), len(te)) == (24 * 28, 24 * 4, 24 * 4)
    assert {m.rate for m in va} == {10.0, 30.0, 50.0, 70.0}
    assert {m.rate for m in te} == {0.0, 20.0, 40.0, 60.0}
    ids = [id(m) for m in tr + va + te]
    assert len(set(ids)) == len(metas) and set(ids) == {id(m) for m in metas}
    assert split_dataset([20.0])[2] == [20.0]


# -- training ----------------------------------------------------------------

@pytest.mark.parametrize("arch", ["mlp", "gcn"])
def test_overfits_a_single_sample(small, arch):
    mesh, topo = small
    s = make_samples(mesh, topo, rates=(20.0,), months=1)
    model = build_model(arch, seed=0, normalization=norm_for())
    res = train(model, s, [], epochs=200, lr=0.01, seed=0)
    assert res.train_loss[0] / min(res.train_loss) >= 100


def test_zero_learning_rate_keeps_parameters(small):
    mesh, topo = small
    model = build_model("gcn", seed=0, normalization=norm_for())
    before = model.params.flat.copy()
    train(model, make_samples(mesh, topo)[:4], [], epochs=2, lr=0.0)
    assert np.array_equal(model.params.flat, before)


def test_seeded_training_is_bit_reproducible(small):
    mesh, topo = small
    samples = make_samples(mesh, topo)
    tr, va = samples[:6], samples[6:]
    runs = []
    for _ in range(2):
        model = build_model("egcn", seed=2, normalization=norm_for())
        res = train(model, tr, va, epochs=3, seed=5)
        runs.append((res.train_loss, res.val_loss, model.params.flat.copy()))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    assert np.array_equal(runs[0][2], runs[1][2])


def test_best_checkpoint_is_restored(small):
    mesh, topo = small
    samples = make_samples(mesh, topo)
    model = build_model("gat", seed=0, normalization=norm_for())
    res = train(model, samples[:6], samples[6:], epochs=6, seed=1)
    assert res.best_val == min(res.val_loss) <= res.val_loss[-1]
    assert evaluate_loss(model, samples[6:]) == pytest.approx(res.best_val, rel=1e-12)


def test_training_input_validation(small):
    mesh, topo = small
    samples = make_samples(mesh, topo)
    with pytest.raises(ValueError, match="NormalizationSpec"):
        train(build_model("mlp"), samples, [])
    with pytest.raises(ValueError, match="overlap"):
        train(build_model("mlp", normalization=norm_for()), samples, samples[:1])


def test_divergence_reports_epoch_and_sample(small):
    mesh, topo = small
    samples = make_samples(mesh, topo)[:2]
    model = build_model("mlp", normalization=norm_for())
    model.params.flat[:] = 1e200
    with pytest.raises(TrainingError, match="epoch 0, sample"):
        with np.errstate(all="ignore"):
            train(model, samples, [], epochs=1)


# -- inference ---------------------------------------------------------------

@pytest.mark.parametrize("arch", ["gcn", "gat", "egcn", "mlp"])
def test_predict_shape_determinism_and_clamp(small, arch):
    mesh, topo = small
    s = make_samples(mesh, topo)[0]
    model = build_model(arch, normalization=norm_for())
    a, b = predict(model, s), predict(model, s)
    assert a.shape == (topo.num_nodes, 3)
    assert np.array_equal(a, b)
    assert np.all(a[:, 2] >= 0)


@pytest.mark.parametrize("arch", ["gcn", "gat", "egcn"])
def test_batched_inference_matches_single_samples(small, arch):
    mesh, topo = small
    samples = make_samples(mesh, topo)
    model = build_model(arch, seed=1, normalization=norm_for())
    batched = predict_many(model, samples)
    for s, p in zip(samples, batched):
        single = model.normalization.denormalize_targets(
            model.forward(Tensor(model.normalized_inputs(s)), model.context(s.topology)).value)
        single[:, 2] = np.maximum(single[:, 2], 0)
        assert np.allclose(p, single, rtol=1e-12, atol=1e-9)


def test_union_topology_is_block_diagonal(small):
    _, topo = small
    u = union_topology(topo, 3)
    n, e = topo.num_nodes, topo.num_edges
    assert u.num_nodes == 3 * n and u.num_edges == 3 * e
    assert np.array_equal(u.edges[e:2 * e], topo.edges + n)
    assert np.array_equal(np.diff(u.neighbor_index), np.tile(topo.degree, 3))


def test_predict_rejects_wrong_feature_width(small):
    mesh, topo = small
    s = make_samples(mesh, topo)[0]
    with pytest.raises(ValueError):
        GraphSample(topo, s.inputs[:, :3], s.targets, s.meta)


def test_fcn_raster_round_trip_of_linear_field(small):
    mesh, _ = small
    grid = GridSpec.for_domain(DOMAIN)
    field = 3.0 * mesh.node_xy[:, 0] - 2.0 * mesh.node_xy[:, 1] + 100.0
    img = grid.rasterize(mesh, field[:, None])
    back = grid.sample(img, mesh.node_xy)[:, 0]
    rel = np.sqrt(np.mean((back - field) ** 2)) / np.ptp(field)
    assert rel < 0.02


def test_fcn_predicts_on_nodes(small):
    mesh, topo = small
    grid = GridSpec((DOMAIN.xmin, DOMAIN.ymin), 5e3, 9, 5)
    model = build_model("fcn", normalization=norm_for(), grid=grid)
    out = predict(model, make_samples(mesh, topo)[0])
    assert out.shape == (topo.num_nodes, 3) and np.all(np.isfinite(out))


def test_default_fcn_grid_follows_domain():
    model = build_model("fcn", normalization=norm_for())
    assert model.grid.spacing == pytest.approx(40e3 / 128)
    assert (model.grid.nx, model.grid.ny) == (129, 65)


@pytest.mark.parametrize("arch", ["egcn", "fcn"])
def test_model_save_load_round_trip(tmp_path, small, arch):
    mesh, topo = small
    grid = GridSpec((DOMAIN.xmin, DOMAIN.ymin), 5e3, 9, 5) if arch == "fcn" else None
    model = build_model(arch, seed=9, normalization=norm_for(), grid=grid)
    save_model(model, tmp_path / "m", {"epochs": 0})
    back = load_model(tmp_path / "m")
    assert np.array_equal(back.params.flat, model.params.flat)
    assert back.normalization == model.normalization and back.grid == model.grid
    s = make_samples(mesh, topo)[0]
    assert np.array_equal(predict(back, s), predict(model, s))
