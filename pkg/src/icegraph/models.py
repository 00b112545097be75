"""Emulator architectures, feature normalisation, dataset splits and the training loop.

All five architectures map 4 input features per node ``(x, y, t, r)`` through
five hidden layers of width 128 to 3 outputs ``(u, v, H)``:

* ``gcn``, ``gat``, ``egcn``: graph layers on the mesh graph;
* ``mlp``: dense layers applied node by node;
* ``fcn``: 3x3 convolutions on a regular raster of the domain, with
  predictions sampled back to the mesh nodes.

The output layer is affine (no activation).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import autodiff as ad
from .autodiff import Tensor
from .layers import GraphContext, LayerSpec, apply_layer, init_layer
from .mesh import GraphTopology, Rectangle, TriMesh, transfer_field

log = logging.getLogger(__name__)

__all__ = [
    "ARCHITECTURES", "HIDDEN_LAYERS", "HIDDEN_WIDTH", "EGCN_SUBNET_WIDTH", "GAT_HEADS", "VALIDATION_RATES",
    "TEST_RATES", "NormalizationSpec", "SampleMeta", "GraphSample", "GridSpec", "EmulatorModel", "build_model",
    "split_dataset", "TrainingError", "TrainResult", "train", "predict", "predict_many", "union_topology",
    "save_model", "load_model", "read_key_values", "evaluate_loss",
]

ARCHITECTURES = ("gcn", "gat", "egcn", "mlp", "fcn")
IN_FEATURES = 4
OUT_FEATURES = 3
HIDDEN_LAYERS = 5
HIDDEN_WIDTH = 128
# width of the phi_e / phi_x / phi_h sub-networks inside each equivariant layer
EGCN_SUBNET_WIDTH = 32
GAT_HEADS = 3
FCN_DIVISIONS = 128
VALIDATION_RATES = (10.0, 30.0, 50.0, 70.0)
TEST_RATES = (0.0, 20.0, 40.0, 60.0)
MAX_RATE = 70.0
BOUND_FACTOR = 1.25


# -- normalisation ------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationSpec:
    """Linear maps sending each feature's nominal ``[min, max]`` onto ``[-1, 1]``."""

    input_min: tuple[float, ...]
    input_max: tuple[float, ...]
    target_min: tuple[float, ...]
    target_max: tuple[float, ...]

    def __post_init__(self):
        for lo, hi, what in ((self.input_min, self.input_max, "input"), (self.target_min, self.target_max, "target")):
            if len(lo) != len(hi) or not all(h > l for l, h in zip(lo, hi)):
                raise ValueError(f"{what} bounds need max > min per feature: {lo} / {hi}")

    @classmethod
    def for_corpus(cls, domain: Rectangle, months: int, max_speed: float, max_thickness: float,
                   max_rate: float = MAX_RATE, factor: float = BOUND_FACTOR) -> "NormalizationSpec":
        cap = factor * max(max_speed, 1e-9)
        return cls((domain.xmin, domain.ymin, 0.0, 0.0), (domain.xmax, domain.ymax, float(months), max_rate),
                   (-cap, -cap, 0.0), (cap, cap, factor * max(max_thickness, 1e-9)))

    @staticmethod
    def _fwd(a: np.ndarray, lo, hi, what: str) -> np.ndarray:
        lo, hi = np.asarray(lo), np.asarray(hi)
        if np.any(a < lo) or np.any(a > hi):
            log.debug("%s features outside nominal bounds; normalised values exceed [-1, 1]", what)
        return 2.0 * (a - lo) / (hi - lo) - 1.0

    @staticmethod
    def _inv(a: np.ndarray, lo, hi) -> np.ndarray:
        lo, hi = np.asarray(lo), np.asarray(hi)
        return (np.asarray(a) + 1.0) * 0.5 * (hi - lo) + lo

    def normalize_inputs(self, a: np.ndarray) -> np.ndarray:
        return self._fwd(np.asarray(a, dtype=np.float64), self.input_min, self.input_max, "input")

    def denormalize_inputs(self, a: np.ndarray) -> np.ndarray:
        return self._inv(a, self.input_min, self.input_max)

    def normalize_targets(self, a: np.ndarray) -> np.ndarray:
        return self._fwd(np.asarray(a, dtype=np.float64), self.target_min, self.target_max, "target")

    def denormalize_targets(self, a: np.ndarray) -> np.ndarray:
        return self._inv(a, self.target_min, self.target_max)

    def to_dict(self) -> dict[str, list[float]]:
        return {k: [float(v) for v in getattr(self, k)] for k in ("input_min", "input_max", "target_min", "target_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(*(tuple(float(v) for v in d[k]) for k in ("input_min", "input_max", "target_min", "target_max")))


# -- samples ------------------------------------------------------------------

@dataclass(frozen=True)
class SampleMeta:
    m0: float
    rate: float
    month: int


@dataclass(frozen=True, eq=False)
class GraphSample:
    """One month of one run: raw inputs ``(x, y, t, r)`` and targets ``(u, v, H)`` per node."""

    topology: GraphTopology
    inputs: np.ndarray
    targets: np.ndarray
    meta: SampleMeta
    mesh: TriMesh | None = None

    def __post_init__(self):
        n = self.topology.num_nodes
        if self.inputs.shape != (n, IN_FEATURES) or self.targets.shape != (n, OUT_FEATURES):
            raise ValueError(f"sample arrays {self.inputs.shape}/{self.targets.shape} do not match {n} nodes")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError(f"sample {self.meta} contains non-finite values")


def union_topology(topology: GraphTopology, copies: int) -> GraphTopology:
    """Disjoint union of ``copies`` relabelled copies of ``topology`` (for batched inference)."""
    n, e = topology.num_nodes, topology.num_edges
    edges = (topology.edges[None] + (np.arange(copies) * n)[:, None, None]).reshape(-1, 2)
    indptr = np.concatenate([[0], (topology.neighbor_index[1:][None] + (np.arange(copies) * e)[:, None]).ravel()])
    return GraphTopology(n * copies, edges, np.tile(topology.edge_distance, copies), indptr,
                         np.tile(topology.node_xy, (copies, 1)))


# -- regular grid for the convolutional baseline ------------------------------

@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]
    spacing: float
    nx: int
    ny: int

    @classmethod
    def for_domain(cls, domain: Rectangle, divisions: int = FCN_DIVISIONS) -> "GridSpec":
        h = max(domain.width, domain.height) / divisions
        return cls((domain.xmin, domain.ymin), h, int(round(domain.width / h)) + 1, int(round(domain.height / h)) + 1)

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + self.spacing * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + self.spacing * np.arange(self.ny)

    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def rasterize(self, mesh: TriMesh, values: np.ndarray) -> np.ndarray:
        """Node values ``(N, C)`` to a ``(C, ny, nx)`` image by barycentric interpolation."""
        vals = np.asarray(values).reshape(mesh.num_nodes, -1)
        pts = self.points()
        cols = [transfer_field(mesh, vals[:, c], pts) for c in range(vals.shape[1])]
        return np.stack(cols).reshape(-1, self.ny, self.nx)

    def sample(self, image: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Bilinear samples of a ``(C, ny, nx)`` image at ``points``, shape ``(P, C)``."""
        out = []
        for c in range(image.shape[0]):
            f = RegularGridInterpolator((self.ys, self.xs), image[c], bounds_error=False, fill_value=None)
            out.append(f(np.asarray(points)[:, ::-1]))
        return np.column_stack(out)


# -- models -------------------------------------------------------------------

def _layer_specs(architecture: str, egcn_width: int) -> list[LayerSpec]:
    kind = {"gcn": "gcn", "gat": "gat", "egcn": "egcn", "mlp": "dense", "fcn": "conv"}[architecture]
    specs = []
    fi = IN_FEATURES
    for layer in range(HIDDEN_LAYERS):
        last = layer == HIDDEN_LAYERS - 1
        specs.append(LayerSpec(kind, fi, HIDDEN_WIDTH, heads=GAT_HEADS if kind == "gat" and last else 1,
                               update_coords=not last, hidden=egcn_width))
        fi = HIDDEN_WIDTH
    specs.append(LayerSpec("conv" if kind == "conv" else "dense", fi, OUT_FEATURES, activation=False))
    return specs


class EmulatorModel:
    """Layer stack plus parameters and the normalisation it was trained with."""

    def __init__(self, architecture: str, layers: list[LayerSpec], params: ad.ParameterSet, seed: int,
                 normalization: NormalizationSpec | None = None, grid: GridSpec | None = None):
        self.architecture = architecture
        self.layers = layers
        self.params = params
        self.seed = seed
        self.normalization = normalization
        self.grid = grid
        self._layer_params = [{k.split(".", 1)[1]: params[k] for k in params.names if k.startswith(f"{i}.")}
                              for i in range(len(layers))]
        self._contexts: dict[tuple[int, int], tuple[GraphTopology, GraphContext]] = {}

    @property
    def parameter_count(self) -> int:
        return self.params.size

    @property
    def is_graph(self) -> bool:
        return self.architecture in ("gcn", "gat", "egcn")

    def context(self, topology: GraphTopology, copies: int = 1) -> GraphContext | None:
        """Cached per-topology index structures (``None`` for architectures without message passing)."""
        if not self.is_graph:
            return None
        key = (id(topology), copies)
        hit = self._contexts.get(key)
        if hit is None or hit[0] is not topology:
            topo = topology if copies == 1 else union_topology(topology, copies)
            hit = (topology, GraphContext(topo))
            self._contexts[key] = hit
        return hit[1]

    def forward(self, x: Tensor, ctx: GraphContext | None = None) -> Tensor:
        """Normalised inputs to normalised outputs.

        Graph and dense models take ``(N, 4)`` node features; the convolutional
        model takes a ``(4, ny, nx)`` image and returns ``(3, ny, nx)``.
        """
        h = x
        coords = ad.Tensor(x.value[:, :2]) if self.architecture == "egcn" else None
        for spec, p in zip(self.layers, self._layer_params):
            h, coords = apply_layer(spec, p, h, ctx, coords)
        return h

    def normalized_inputs(self, sample: GraphSample) -> np.ndarray:
        return self.normalization.normalize_inputs(sample.inputs)

    def normalized_targets(self, sample: GraphSample) -> np.ndarray:
        return self.normalization.normalize_targets(sample.targets)

    # convolutional model: samples live on the raster
    def raster_inputs(self, sample: GraphSample) -> np.ndarray:
        pts = self.grid.points()
        t = np.full(len(pts), sample.inputs[0, 2])
        r = np.full(len(pts), sample.inputs[0, 3])
        raw = np.column_stack([pts, t, r])
        return self.normalization.normalize_inputs(raw).T.reshape(IN_FEATURES, self.grid.ny, self.grid.nx)

    def raster_targets(self, sample: GraphSample) -> np.ndarray:
        if sample.mesh is None:
            raise ValueError("the convolutional model needs samples that carry their mesh")
        return self.grid.rasterize(sample.mesh, self.normalization.normalize_targets(sample.targets))

    def to_manifest(self) -> dict:
        return {"architecture": self.architecture, "seed": self.seed, "parameters": self.parameter_count,
                "egcn_subnet_width": self.layers[0].hidden, "normalization": self.normalization.to_dict()
                if self.normalization else None,
                "grid": None if self.grid is None else [*self.grid.origin, self.grid.spacing, self.grid.nx, self.grid.ny]}


def build_model(architecture: str, seed: int = 0, normalization: NormalizationSpec | None = None,
                grid: GridSpec | None = None, egcn_width: int = EGCN_SUBNET_WIDTH) -> EmulatorModel:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; choose from {', '.join(ARCHITECTURES)}")
    specs = _layer_specs(architecture, egcn_width)
    if architecture == "fcn" and grid is None and normalization is not None:
        lo, hi = normalization.input_min, normalization.input_max
        grid = GridSpec.for_domain(Rectangle(lo[0], hi[0], lo[1], hi[1]))
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, spec in enumerate(specs):
        for k, v in init_layer(spec, rng).items():
            arrays[f"{i}.{k}"] = v
    return EmulatorModel(architecture, specs, ad.ParameterSet(arrays), seed, normalization, grid)


# -- splits -------------------------------------------------------------------

def _rate_of(item) -> float:
    meta = getattr(item, "meta", item)
    return float(getattr(meta, "rate", meta))


def split_dataset(samples: Sequence, validation_rates: Sequence[float] = VALIDATION_RATES,
                  test_rates: Sequence[float] = TEST_RATES) -> tuple[list, list, list]:
    """Partition by melt rate: held-out validation and test rates, everything else trains."""
    if set(validation_rates) & set(test_rates):
        raise ValueError("validation and test rates overlap")
    train_set, val_set, test_set = [], [], []
    for s in samples:
        r = _rate_of(s)
        if any(math.isclose(r, v, abs_tol=1e-9) for v in validation_rates):
            val_set.append(s)
        elif any(math.isclose(r, v, abs_tol=1e-9) for v in test_rates):
            test_set.append(s)
        else:
            train_set.append(s)
    return train_set, val_set, test_set


# -- training -----------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    seconds: float = 0.0


def _prepared(model: EmulatorModel, samples: Sequence[GraphSample]):
    """Normalised (input, target, context) triples ready for stepping."""
    out = []
    for s in samples:
        if model.architecture == "fcn":
            out.append((model.raster_inputs(s), model.raster_targets(s), None))
        else:
            out.append((model.normalized_inputs(s), model.normalized_targets(s), model.context(s.topology)))
    return out


def _groups(samples: Sequence[GraphSample]) -> list[list[int]]:
    """Sample indices grouped by shared topology, in first-seen order."""
    groups: dict[int, list[int]] = {}
    for k, s in enumerate(samples):
        groups.setdefault(id(s.topology), []).append(k)
    return list(groups.values())


def _normalized_outputs(model: EmulatorModel, samples: Sequence[GraphSample], batch: int = 32) -> list[np.ndarray]:
    """Forward passes without a tape; samples on one topology run as a disjoint-union batch."""
    outs: list[np.ndarray | None] = [None] * len(samples)
    if model.architecture == "fcn":
        for k, s in enumerate(samples):
            img = model.forward(Tensor(model.raster_inputs(s))).value
            outs[k] = model.grid.sample(img, s.topology.node_xy)
        return outs
    for idx in _groups(samples):
        topo = samples[idx[0]].topology
        n = topo.num_nodes
        for start in range(0, len(idx), batch):
            chunk = idx[start:start + batch]
            x = np.concatenate([model.normalized_inputs(samples[k]) for k in chunk])
            y = model.forward(Tensor(x), model.context(topo, len(chunk))).value
            for c, k in enumerate(chunk):
                outs[k] = y[c * n:(c + 1) * n]
    return outs


def evaluate_loss(model: EmulatorModel, samples: Sequence[GraphSample]) -> float:
    """Mean over samples of the normalised-output MSE."""
    if not samples:
        return math.nan
    if model.architecture == "fcn":
        losses = []
        for s in samples:
            y = model.forward(Tensor(model.raster_inputs(s))).value
            losses.append(float(np.mean((y - model.raster_targets(s)) ** 2)))
        return float(np.mean(losses))
    outs = _normalized_outputs(model, samples)
    return float(np.mean([np.mean((o - model.normalized_targets(s)) ** 2) for o, s in zip(outs, samples)]))


def train(model: EmulatorModel, train_set: Sequence[GraphSample], val_set: Sequence[GraphSample],
          epochs: int = 200, lr: float = 0.01, seed: int = 0,
          progress: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Adam, one step per sample, samples shuffled each epoch; parameters end at the best validation epoch."""
    if model.normalization is None:
        raise ValueError("model needs a NormalizationSpec before training")
    if {id(s) for s in train_set} & {id(s) for s in val_set}:
        raise ValueError("training and validation sets overlap")
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    data = _prepared(model, train_set)
    opt = ad.Adam(model.params, lr=lr)
    result = TrainResult()
    best = model.params.flat.copy()
    t0 = time.perf_counter()
    for epoch in range(epochs):
        total = 0.0
        for k in rng.permutation(len(data)):
            x, y, ctx = data[k]
            model.params.zero_grad()
            with ad.Tape() as tape:
                loss = ad.mse_loss(model.forward(Tensor(x), ctx), y)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, sample {int(k)} ({train_set[k].meta})")
            tape.backward(loss)
            opt.step()
            total += value
        result.train_loss.append(total / len(data))
        val = evaluate_loss(model, val_set) if val_set else result.train_loss[-1]
        result.val_loss.append(val)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best[...] = model.params.flat
        if progress is not None:
            progress(epoch, result.train_loss[-1], val)
    model.params.flat[...] = best
    result.seconds = time.perf_counter() - t0
    return result


# -- inference ----------------------------------------------------------------

def _finish(model: EmulatorModel, normalized: np.ndarray) -> np.ndarray:
    out = model.normalization.denormalize_targets(normalized)
    out[:, 2] = np.maximum(out[:, 2], 0.0)
    return out


def predict(model: EmulatorModel, sample: GraphSample) -> np.ndarray:
    """Denormalised ``(u, v, H)`` per node, thickness clamped at 0."""
    return predict_many(model, [sample])[0]


def predict_many(model: EmulatorModel, samples: Sequence[GraphSample]) -> list[np.ndarray]:
    if model.normalization is None:
        raise ValueError("model has no NormalizationSpec")
    for s in samples:
        if s.inputs.shape[1] != IN_FEATURES:
            raise ValueError(f"sample has {s.inputs.shape[1]} input features, model expects {IN_FEATURES}")
    return [_finish(model, o) for o in _normalized_outputs(model, samples)]


# -- persistence --------------------------------------------------------------

def save_model(model: EmulatorModel, out: str | Path, extra: dict[str, object] | None = None) -> None:
    """``params.bin`` checkpoint plus a ``model.txt`` manifest of ``key = value`` lines."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(out / "params.bin", model.params.arrays())
    n = model.normalization
    lines = {
        "architecture": model.architecture,
        "seed": model.seed,
        "egcn_subnet_width": model.layers[0].hidden,
        "parameters": model.parameter_count,
    }
    if n is not None:
        for k, v in n.to_dict().items():
            lines[k] = " ".join(repr(x) for x in v)
    if model.grid is not None:
        g = model.grid
        lines["grid"] = f"{g.origin[0]!r} {g.origin[1]!r} {g.spacing!r} {g.nx} {g.ny}"
    lines |= extra or {}
    (out / "model.txt").write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))


def read_key_values(path: str | Path) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def load_model(path: str | Path) -> EmulatorModel:
    path = Path(path)
    kv = read_key_values(path / "model.txt")
    norm = None
    if "input_min" in kv:
        norm = NormalizationSpec.from_dict({k: kv[k].split() for k in ("input_min", "input_max", "target_min", "target_max")})
    grid = None
    if "grid" in kv:
        g = kv["grid"].split()
        grid = GridSpec((float(g[0]), float(g[1])), float(g[2]), int(g[3]), int(g[4]))
    model = build_model(kv["architecture"], int(kv["seed"]), norm, grid, int(kv["egcn_subnet_width"]))
    model.params.load(ad.load_checkpoint(path / "params.bin"))
    return model
