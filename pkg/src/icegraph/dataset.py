"""Instructor sweeps stored as an on-disk corpus of monthly graph samples.

Layout under the corpus root::

    manifest.txt
    <m0>/mesh.txt
    <m0>/r<rate>/trajectory.bin

A trajectory file is a table with one record per (step, node):
``step time node_id H u v s floating``, little-endian, behind a short header.
The manifest lists every (mesh, rate) run with the SHA-256 of its files and a
global fingerprint over all of them.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mesh import GraphTopology, Rectangle, TriMesh, mesh_to_graph, read_mesh, write_mesh
from .models import GraphSample, NormalizationSpec, SampleMeta
from .ssa import (
    DESK_DOMAIN, GlacierState, PhysicsParams, ScenarioConfig, SimulationError, prepare_glacier, run_transient,
)

log = logging.getLogger(__name__)

__all__ = [
    "TRAJECTORY_DTYPE", "DESK_RATES", "CorpusConfig", "CorpusEntry", "CorpusManifest", "CorpusError",
    "write_trajectory", "read_trajectory", "trajectory_table", "build_corpus", "load_manifest", "load_sample",
    "load_samples", "file_sha256",
]

TRAJECTORY_DTYPE = np.dtype([
    ("step", "<i4"), ("time", "<f8"), ("node_id", "<i4"), ("H", "<f8"), ("u", "<f8"), ("v", "<f8"),
    ("s", "<f8"), ("floating", "u1"),
])
_TRAJ_MAGIC = b"ICEGRAPH-TRAJ\x00\x00\x01"
DESK_RATES = tuple(float(r) for r in range(0, 71, 2))


class CorpusError(RuntimeError):
    pass


# -- trajectory tables --------------------------------------------------------

def trajectory_table(states: Sequence[GlacierState]) -> np.ndarray:
    n = len(states[0].H) if states else 0
    table = np.empty(len(states) * n, dtype=TRAJECTORY_DTYPE)
    for k, st in enumerate(states):
        rows = table[k * n:(k + 1) * n]
        rows["step"] = k
        rows["time"] = st.time
        rows["node_id"] = np.arange(n)
        rows["H"], rows["u"], rows["v"], rows["s"] = st.H, st.u, st.v, st.s
        rows["floating"] = st.floating
    return table


def write_trajectory(path: str | Path, states: Sequence[GlacierState]) -> None:
    table = trajectory_table(states)
    n = len(states[0].H) if states else 0
    with open(path, "wb") as f:
        f.write(_TRAJ_MAGIC)
        f.write(np.array([len(states), n], dtype="<i8").tobytes())
        f.write(table.tobytes())


def read_trajectory(path: str | Path) -> np.ndarray:
    """The trajectory table reshaped to ``(steps, nodes)`` records."""
    data = Path(path).read_bytes()
    head = len(_TRAJ_MAGIC) + 16
    if not data.startswith(_TRAJ_MAGIC) or len(data) < head:
        raise CorpusError(f"{path}: not a trajectory file")
    steps, n = np.frombuffer(data, dtype="<i8", count=2, offset=len(_TRAJ_MAGIC))
    if len(data) != head + int(steps * n) * TRAJECTORY_DTYPE.itemsize:
        raise CorpusError(f"{path}: size does not match {steps} steps x {n} nodes")
    return np.frombuffer(data, dtype=TRAJECTORY_DTYPE, offset=head).reshape(int(steps), int(n)).copy()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- corpus -------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    mesh_sizes: tuple[float, ...] = (20e3,)
    rates: tuple[float, ...] = DESK_RATES
    months: int = 24
    dt_months: int = 1
    seed: int = 0
    domain: Rectangle = DESK_DOMAIN

    def __post_init__(self):
        # floats throughout so the manifest text reloads to an identical config
        object.__setattr__(self, "mesh_sizes", tuple(float(m) for m in self.mesh_sizes))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if not self.mesh_sizes or not self.rates or self.months < 1 or self.dt_months < 1:
            raise ValueError(f"empty or non-positive corpus configuration: {self}")
        if self.months % self.dt_months:
            raise ValueError("months must be a multiple of dt_months")
        if len(set(self.rates)) != len(self.rates) or len(set(self.mesh_sizes)) != len(self.mesh_sizes):
            raise ValueError("mesh sizes and rates must be distinct")

    @property
    def expected_samples(self) -> int:
        return len(self.mesh_sizes) * len(self.rates) * (self.months // self.dt_months)

    def scenario(self, rate: float, m0: float) -> ScenarioConfig:
        return ScenarioConfig(melt_rate=rate, duration=self.months / 12.0, dt=self.dt_months / 12.0, m0=m0)


@dataclass(frozen=True)
class CorpusEntry:
    m0: float
    rate: float
    mesh_file: str
    trajectory_file: str
    samples: int
    mesh_sha256: str
    trajectory_sha256: str


def _tag(x: float) -> str:
    return f"{x:g}"


def _fingerprint(config_line: str, entries: Sequence[CorpusEntry]) -> str:
    h = hashlib.sha256(config_line.encode())
    for e in entries:
        h.update(f"{e.m0!r} {e.rate!r} {e.samples} {e.mesh_sha256} {e.trajectory_sha256}\n".encode())
    return h.hexdigest()


@dataclass
class CorpusManifest:
    root: Path
    config: CorpusConfig
    entries: list[CorpusEntry]
    fingerprint: str
    max_speed: float
    max_thickness: float
    _verified: set[str] = field(default_factory=set, repr=False)
    _meshes: dict[str, tuple[TriMesh, GraphTopology]] = field(default_factory=dict, repr=False)

    @property
    def num_samples(self) -> int:
        return sum(e.samples for e in self.entries)

    @property
    def steps_per_run(self) -> int:
        return self.config.months // self.config.dt_months

    def month_index(self, step: int) -> int:
        """0-based month ended by stored step ``step``."""
        return (step + 1) * self.config.dt_months - 1

    def normalization(self) -> NormalizationSpec:
        return NormalizationSpec.for_corpus(self.config.domain, self.config.months, self.max_speed, self.max_thickness)

    def locate(self, index: int) -> tuple[CorpusEntry, int]:
        if not 0 <= index < self.num_samples:
            raise IndexError(f"sample {index} outside corpus of {self.num_samples}")
        return self.entries[index // self.steps_per_run], index % self.steps_per_run

    def verified_path(self, rel: str, digest: str) -> Path:
        path = self.root / rel
        if rel not in self._verified:
            if not path.exists():
                raise CorpusError(f"{path}: missing")
            if file_sha256(path) != digest:
                raise CorpusError(f"{path}: content hash does not match the manifest (fingerprint mismatch)")
            self._verified.add(rel)
        return path

    def mesh(self, entry: CorpusEntry) -> tuple[TriMesh, GraphTopology]:
        hit = self._meshes.get(entry.mesh_file)
        if hit is None:
            mesh = read_mesh(self.verified_path(entry.mesh_file, entry.mesh_sha256))
            hit = (mesh, mesh_to_graph(mesh))
            self._meshes[entry.mesh_file] = hit
        return hit

    def write(self) -> None:
        c = self.config
        d = c.domain
        lines = [
            "icegraph-corpus 1",
            f"mesh_sizes {' '.join(map(repr, c.mesh_sizes))}",
            f"rates {' '.join(map(repr, c.rates))}",
            f"months {c.months}",
            f"dt_months {c.dt_months}",
            f"seed {c.seed}",
            f"domain {d.xmin!r} {d.xmax!r} {d.ymin!r} {d.ymax!r}",
            f"max_speed {self.max_speed!r}",
            f"max_thickness {self.max_thickness!r}",
            f"fingerprint {self.fingerprint}",
            "# m0 rate mesh_file trajectory_file samples mesh_sha256 trajectory_sha256",
        ]
        for e in self.entries:
            lines.append(f"entry {e.m0!r} {e.rate!r} {e.mesh_file} {e.trajectory_file} {e.samples} "
                         f"{e.mesh_sha256} {e.trajectory_sha256}")
        (self.root / "manifest.txt").write_text("\n".join(lines) + "\n")


def _config_line(c: CorpusConfig) -> str:
    d = c.domain
    return f"{c.mesh_sizes!r} {c.rates!r} {c.months} {c.dt_months} {c.seed} {(d.xmin, d.xmax, d.ymin, d.ymax)!r}"


def load_manifest(root: str | Path) -> CorpusManifest:
    root = Path(root)
    path = root / "manifest.txt"
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise CorpusError(f"{path}: cannot read manifest ({exc})") from exc
    if not lines or lines[0] != "icegraph-corpus 1":
        raise CorpusError(f"{path}: not a corpus manifest")
    kv, entries = {}, []
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "entry":
            p = rest.split()
            entries.append(CorpusEntry(float(p[0]), float(p[1]), p[2], p[3], int(p[4]), p[5], p[6]))
        else:
            kv[key] = rest
    try:
        dom = [float(v) for v in kv["domain"].split()]
        config = CorpusConfig(tuple(float(v) for v in kv["mesh_sizes"].split()),
                              tuple(float(v) for v in kv["rates"].split()), int(kv["months"]), int(kv["dt_months"]),
                              int(kv["seed"]), Rectangle(*dom))
        manifest = CorpusManifest(root, config, entries, kv["fingerprint"], float(kv["max_speed"]),
                                  float(kv["max_thickness"]))
    except (KeyError, ValueError) as exc:
        raise CorpusError(f"{path}: malformed manifest ({exc})") from exc
    if _fingerprint(_config_line(config), entries) != manifest.fingerprint:
        raise CorpusError(f"{path}: fingerprint does not match the listed entries")
    return manifest


def _run_one(args) -> tuple[float, float, list[GlacierState]]:
    m0, rate, config, params, initial, mesh = args
    states = run_transient(config.scenario(rate, m0), initial, mesh, params)
    return m0, rate, states


def build_corpus(config: CorpusConfig, out: str | Path, params: PhysicsParams = PhysicsParams(),
                 workers: int = 1) -> CorpusManifest:
    """Run the instructor for every (mesh size, rate) pair and store the monthly states.

    Every run must succeed before anything is written to ``out``; files are
    staged in a sibling temporary directory and moved into place at the end.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise CorpusError(f"{out}: output directory is not empty")
    prepared = {m0: prepare_glacier(m0, config.domain, params=params, seed=config.seed) for m0 in config.mesh_sizes}
    jobs = [(m0, r, config, params, prepared[m0][1], prepared[m0][0]) for m0 in config.mesh_sizes for r in config.rates]
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_one, jobs))
        else:
            results = [_run_one(j) for j in jobs]
    except SimulationError as exc:
        raise CorpusError(f"instructor run failed, corpus not written: {exc}") from exc
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".corpus-", dir=out.parent))
    try:
        entries = []
        max_speed = max_h = 0.0
        for m0, (mesh, _) in prepared.items():
            (stage / _tag(m0)).mkdir()
            write_mesh(mesh, stage / _tag(m0) / "mesh.txt")
        for m0, rate, states in results:
            rel_mesh = f"{_tag(m0)}/mesh.txt"
            rel_traj = f"{_tag(m0)}/r{_tag(rate)}/trajectory.bin"
            (stage / rel_traj).parent.mkdir()
            write_trajectory(stage / rel_traj, states)
            for st in states:
                max_speed = max(max_speed, float(np.max(np.abs(np.concatenate([st.u, st.v])))))
                max_h = max(max_h, float(st.H.max()))
            entries.append(CorpusEntry(m0, rate, rel_mesh, rel_traj, len(states),
                                       file_sha256(stage / rel_mesh), file_sha256(stage / rel_traj)))
        manifest = CorpusManifest(stage, config, entries, _fingerprint(_config_line(config), entries),
                                  max_speed, max_h)
        manifest.write()
        out.mkdir(parents=True, exist_ok=True)
        for item in stage.iterdir():
            os.replace(item, out / item.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    log.info("corpus %s: %d samples, fingerprint %s", out, manifest.num_samples, manifest.fingerprint[:12])
    return load_manifest(out)


def _samples_from(manifest: CorpusManifest, entry: CorpusEntry, table: np.ndarray,
                  months: Sequence[int]) -> list[GraphSample]:
    mesh, topo = manifest.mesh(entry)
    xy = mesh.node_xy
    out = []
    for k in months:
        rows = table[k]
        n = len(rows)
        inputs = np.column_stack([xy, np.full(n, float(manifest.month_index(k))), np.full(n, entry.rate)])
        targets = np.column_stack([rows["u"], rows["v"], rows["H"]])
        out.append(GraphSample(topo, inputs, targets, SampleMeta(entry.m0, entry.rate, manifest.month_index(k)), mesh))
    return out


def load_sample(manifest: CorpusManifest, index: int) -> GraphSample:
    entry, month = manifest.locate(index)
    table = read_trajectory(manifest.verified_path(entry.trajectory_file, entry.trajectory_sha256))
    return _samples_from(manifest, entry, table, [month])[0]


def load_samples(manifest: CorpusManifest) -> list[GraphSample]:
    """Every sample in corpus order (mesh size, then rate, then month)."""
    out = []
    for entry in manifest.entries:
        table = read_trajectory(manifest.verified_path(entry.trajectory_file, entry.trajectory_sha256))
        if table.shape[0] != entry.samples:
            raise CorpusError(f"{entry.trajectory_file}: {table.shape[0]} steps, manifest says {entry.samples}")
        out.extend(_samples_from(manifest, entry, table, range(entry.samples)))
    return out
