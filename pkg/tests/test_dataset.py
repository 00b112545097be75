import shutil

import numpy as np
import pytest

from icegraph import dataset as ds
from icegraph.dataset import (
    CorpusConfig, CorpusError, build_corpus, load_manifest, load_sample, load_samples, read_trajectory,
    write_trajectory,
)
from icegraph.ssa import prepare_glacier, run_transient

SMALL = CorpusConfig(mesh_sizes=(20e3,), rates=(0.0, 30.0), months=3)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "c"
    return build_corpus(SMALL, root)


def test_expected_sample_counts():
    rates = tuple(range(0, 71, 2))
    assert CorpusConfig(mesh_sizes=(5e3, 10e3, 20e3), rates=rates, months=240).expected_samples == 25_920
    assert CorpusConfig(rates=rates, months=24).expected_samples == 864
    assert CorpusConfig().expected_samples == 864


def test_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(rates=())
    with pytest.raises(ValueError):
        CorpusConfig(months=5, dt_months=2)
    with pytest.raises(ValueError):
        CorpusConfig(rates=(0.0, 0))


def test_small_corpus_layout_and_completeness(corpus):
    root = corpus.root
    assert corpus.num_samples == SMALL.expected_samples == 6
    assert (root / "manifest.txt").exists() and (root / "20000" / "mesh.txt").exists()
    assert (root / "20000" / "r30" / "trajectory.bin").exists()
    samples = load_samples(corpus)
    triples = [(s.meta.m0, s.meta.rate, s.meta.month) for s in samples]
    assert len(set(triples)) == len(triples) == 6
    assert set(triples) == {(20e3, r, k) for r in (0.0, 30.0) for k in range(3)}


def test_samples_round_trip_the_instructor(corpus):
    mesh, state = prepare_glacier(20e3)
    states = run_transient(SMALL.scenario(30.0, 20e3), state, mesh)
    for k in range(3):
        s = load_sample(corpus, 3 + k)
        assert (s.meta.rate, s.meta.month) == (30.0, k)
        assert np.array_equal(s.targets[:, 0], states[k].u)
        assert np.array_equal(s.targets[:, 1], states[k].v)
        assert np.array_equal(s.targets[:, 2], states[k].H)
        assert np.array_equal(s.inputs[:, :2], mesh.node_xy)
        assert np.all(s.inputs[:, 2] == k) and np.all(s.inputs[:, 3] == 30.0)


def test_load_sample_matches_bulk_load(corpus):
    bulk = load_samples(corpus)
    for i in (0, 5):
        one = load_sample(corpus, i)
        assert np.array_equal(one.inputs, bulk[i].inputs) and np.array_equal(one.targets, bulk[i].targets)


def test_out_of_range_index(corpus):
    with pytest.raises(IndexError):
        load_sample(corpus, 6)
    with pytest.raises(IndexError):
        load_sample(corpus, -1)


def test_normalization_snapshot_covers_corpus(corpus):
    n = corpus.normalization()
    targets = np.concatenate([s.targets for s in load_samples(corpus)])
    assert np.all(np.abs(n.normalize_targets(targets)) <= 1.0)
    assert n.input_max[2] == 3.0 and n.input_max[3] == 70.0


def test_rebuild_gives_identical_fingerprint(corpus, tmp_path):
    again = build_corpus(SMALL, tmp_path / "again", workers=2)
    assert again.fingerprint == corpus.fingerprint
    other = build_corpus(CorpusConfig(mesh_sizes=(20e3,), rates=(0.0, 32.0), months=3), tmp_path / "other")
    assert other.fingerprint != corpus.fingerprint


def test_corrupted_trajectory_is_detected(corpus, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(corpus.root, root)
    traj = root / "20000" / "r0" / "trajectory.bin"
    data = bytearray(traj.read_bytes())
    data[-3] ^= 0xFF
    traj.write_bytes(bytes(data))
    manifest = load_manifest(root)
    with pytest.raises(CorpusError, match="fingerprint mismatch"):
        load_sample(manifest, 0)
    # the other run is untouched and still loads
    assert load_sample(manifest, 3).meta.rate == 30.0


def test_edited_manifest_is_detected(corpus, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(corpus.root, root)
    text = (root / "manifest.txt").read_text().replace("months 3", "months 4")
    (root / "manifest.txt").write_text(text)
    with pytest.raises(CorpusError, match="fingerprint"):
        load_manifest(root)
    with pytest.raises(CorpusError, match="not a corpus manifest"):
        (root / "manifest.txt").write_text("hello\n")
        load_manifest(root)


def test_failed_run_writes_nothing(tmp_path, monkeypatch):
    def boom(args):
        raise ds.SimulationError(1, FloatingPointError("diverged"))
    monkeypatch.setattr(ds, "_run_one", boom)
    with pytest.raises(CorpusError, match="not written"):
        build_corpus(SMALL, tmp_path / "c")
    assert not (tmp_path / "c").exists()
    assert list(tmp_path.iterdir()) == []


def test_refuses_non_empty_output(tmp_path):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "keep.txt").write_text("x")
    with pytest.raises(CorpusError, match="not empty"):
        build_corpus(SMALL, tmp_path / "c")


def test_trajectory_file_round_trip(tmp_path):
    mesh, state = prepare_glacier(20e3)
    states = run_transient(SMALL.scenario(10.0, 20e3), state, mesh)
    write_trajectory(tmp_path / "t.bin", states)
    table = read_trajectory(tmp_path / "t.bin")
    assert table.shape == (3, mesh.num_nodes)
    assert np.array_equal(table["H"][2], states[2].H)
    assert np.array_equal(table["floating"][1].astype(bool), states[1].floating)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-8])
    with pytest.raises(CorpusError, match="size"):
        read_trajectory(tmp_path / "bad.bin")
