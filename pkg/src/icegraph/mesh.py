"""Unstructured triangular meshes and their graph view.

Meshes are immutable once built.  Coordinates are metres; triangles are
stored counter-clockwise as rows of three node indices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay, cKDTree

log = logging.getLogger(__name__)

DUPLICATE_TOL = 1e-9
# mean edge length of a square split along one diagonal, in units of the side
_SPLIT_SQUARE_EDGE = (2.0 + math.sqrt(2.0)) / 3.0


class MeshError(ValueError):
    """Raised for invalid mesh input or violated mesh invariants."""


@dataclass(frozen=True)
class Rectangle:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with per-node boundary flags and target edge lengths."""

    node_xy: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    target_edge_length: np.ndarray = field(default=None)

    def __post_init__(self):
        xy = np.asarray(self.node_xy, dtype=np.float64)
        tri = np.asarray(self.triangles, dtype=np.int64)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise MeshError(f"node_xy must be (N, 2), got {xy.shape}")
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise MeshError(f"triangles must be (T, 3), got {tri.shape}")
        bnd = np.zeros(len(xy), dtype=bool) if self.boundary is None else np.asarray(self.boundary)
        if bnd.dtype != bool:
            # a list of boundary node indices
            mask = np.zeros(len(xy), dtype=bool)
            mask[bnd.astype(np.int64)] = True
            bnd = mask
        if bnd.shape != (len(xy),):
            raise MeshError("boundary mask length differs from node count")
        tel = self.target_edge_length
        if tel is None:
            tel = np.full(len(xy), np.nan)
        tel = np.asarray(tel, dtype=np.float64)
        object.__setattr__(self, "node_xy", _freeze(xy))
        object.__setattr__(self, "triangles", _freeze(tri))
        object.__setattr__(self, "boundary", _freeze(bnd))
        object.__setattr__(self, "target_edge_length", _freeze(tel))
        self.validate()

    # -- invariants -------------------------------------------------------
    def validate(self) -> None:
        n = self.num_nodes
        tri = self.triangles
        if len(tri) == 0:
            raise MeshError("mesh has no triangles")
        if tri.min() < 0 or tri.max() >= n:
            raise MeshError("triangle references an out-of-range node")
        if np.any((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])):
            raise MeshError("triangle with repeated node index")
        areas = signed_areas(self.node_xy, tri)
        if np.any(areas <= 0.0):
            bad = np.flatnonzero(areas <= 0.0)
            raise MeshError(f"{len(bad)} triangles have non-positive signed area (first: {bad[0]})")
        pairs = cKDTree(self.node_xy).query_pairs(DUPLICATE_TOL)
        if pairs:
            raise MeshError(f"duplicate nodes within {DUPLICATE_TOL} m: {sorted(pairs)[:3]}")

    # -- basic geometry ---------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.node_xy)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary)

    @cached_property
    def areas(self) -> np.ndarray:
        return signed_areas(self.node_xy, self.triangles)

    @cached_property
    def nodal_areas(self) -> np.ndarray:
        """One third of the incident triangle areas, per node."""
        out = np.zeros(self.num_nodes)
        np.add.at(out, self.triangles.ravel(), np.repeat(self.areas / 3.0, 3))
        return out

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 hat functions, shape (T, 3, 2)."""
        p = self.node_xy[self.triangles]
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.areas
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / two_a[:, None]
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / two_a[:, None]
        return np.stack([gx, gy], axis=-1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (i < j), lexicographically sorted."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.node_xy[self.edges[:, 0]] - self.node_xy[self.edges[:, 1]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Edges used by exactly one triangle, oriented along the triangle (CCW)."""
        t = self.triangles
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(directed, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return directed[counts[inv.ravel()] == 1]

    @cached_property
    def bounding_box(self) -> Rectangle:
        lo = self.node_xy.min(axis=0)
        hi = self.node_xy.max(axis=0)
        return Rectangle(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))

    @cached_property
    def mass_matrix(self) -> sparse.csr_matrix:
        """Consistent P1 mass matrix."""
        local = (np.ones((3, 3)) + np.eye(3)) / 12.0
        vals = self.areas[:, None, None] * local[None]
        rows = np.repeat(self.triangles, 3, axis=1)
        cols = np.tile(self.triangles, (1, 3))
        m = sparse.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(self.num_nodes,) * 2)
        return m.tocsr()

    def mean_edge_length(self, mask: np.ndarray | None = None) -> float:
        """Mean edge length, optionally over edges whose midpoint satisfies ``mask(mid)``."""
        if mask is None:
            return float(self.edge_lengths.mean())
        mid = 0.5 * (self.node_xy[self.edges[:, 0]] + self.node_xy[self.edges[:, 1]])
        sel = mask(mid)
        return float(self.edge_lengths[sel].mean())

    @cached_property
    def _locator(self) -> _TriangleLocator:
        return _TriangleLocator(self)

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle index (-1 outside) and barycentric weights per point."""
        return self._locator.locate(np.asarray(points, dtype=np.float64).reshape(-1, 2))


def signed_areas(xy: np.ndarray, tri: np.ndarray) -> np.ndarray:
    p = xy[tri]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


def _orient_ccw(xy: np.ndarray, tri: np.ndarray) -> np.ndarray:
    tri = np.array(tri, dtype=np.int64)
    flip = signed_areas(xy, tri) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


class _TriangleLocator:
    """Point location via nearest triangle centroids, brute force as fallback."""

    def __init__(self, mesh: TriMesh, k: int = 12):
        self.xy = mesh.node_xy
        self.tri = mesh.triangles
        self.k = min(k, len(self.tri))
        self.tree = cKDTree(self.xy[self.tri].mean(axis=1))
        p = self.xy[self.tri]
        # affine map from (x - p0) to barycentric coordinates (l1, l2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.p0 = p[:, 0]
        self.inv = np.stack(
            [np.stack([d2[:, 1], -d2[:, 0]], -1), np.stack([-d1[:, 1], d1[:, 0]], -1)], axis=1
        ) / det[:, None, None]

    def _bary(self, pts: np.ndarray, cand: np.ndarray) -> np.ndarray:
        rel = pts[:, None, :] - self.p0[cand]
        l12 = np.einsum("qkij,qkj->qki", self.inv[cand], rel)
        l0 = 1.0 - l12.sum(axis=-1)
        return np.concatenate([l0[..., None], l12], axis=-1)

    def locate(self, pts: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        n = len(pts)
        which = np.full(n, -1, dtype=np.int64)
        weights = np.full((n, 3), np.nan)
        if n == 0:
            return which, weights
        _, cand = self.tree.query(pts, k=self.k)
        cand = cand.reshape(n, -1)
        lam = self._bary(pts, cand)
        ok = lam.min(axis=-1) >= -tol
        hit = ok.any(axis=1)
        first = ok.argmax(axis=1)
        rows = np.flatnonzero(hit)
        which[rows] = cand[rows, first[rows]]
        weights[rows] = lam[rows, first[rows]]
        miss = np.flatnonzero(~hit)
        if len(miss):
            all_t = np.arange(len(self.tri))
            for start in range(0, len(miss), 256):
                chunk = miss[start:start + 256]
                lam_all = self._bary(pts[chunk], np.broadcast_to(all_t, (len(chunk), len(all_t))))
                ok_all = lam_all.min(axis=-1) >= -tol
                found = ok_all.any(axis=1)
                j = ok_all.argmax(axis=1)
                r = chunk[found]
                which[r] = j[found]
                weights[r] = lam_all[np.flatnonzero(found), j[found]]
        return which, weights


# -- generation ----------------------------------------------------------

def generate_initial_mesh(domain: Rectangle, m0: float, jitter: float = 0.1, seed: int = 0) -> TriMesh:
    """Split-square triangulation of a rectangle with jittered interior nodes.

    The grid spacing is chosen so the mean edge length (sides plus diagonals)
    lands close to ``m0``.
    """
    if not m0 > 0:
        raise MeshError(f"m0 must be positive, got {m0}")
    if domain.width <= 0 or domain.height <= 0:
        raise MeshError(f"degenerate domain {domain}: zero area")
    if domain.width < 4 * m0 or domain.height < 4 * m0:
        raise MeshError(
            f"domain {domain.width:g} x {domain.height:g} m too small for m0={m0:g} m (need sides >= 4*m0)"
        )
    nx = max(4, int(math.floor(_SPLIT_SQUARE_EDGE * domain.width / m0)))
    ny = max(4, int(math.floor(_SPLIT_SQUARE_EDGE * domain.height / m0)))
    xs = np.linspace(domain.xmin, domain.xmax, nx + 1)
    ys = np.linspace(domain.ymin, domain.ymax, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)

    boundary = np.zeros(len(xy), dtype=bool)
    boundary[idx[0]] = boundary[idx[-1]] = boundary[idx[:, 0]] = boundary[idx[:, -1]] = True
    rng = np.random.default_rng(seed)
    hx, hy = domain.width / nx, domain.height / ny
    shift = rng.uniform(-jitter, jitter, size=xy.shape) * np.array([hx, hy])
    xy[~boundary] += shift[~boundary]

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx[j, i], idx[j, i + 1], idx[j + 1, i + 1], idx[j + 1, i]
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    tri = _orient_ccw(xy, np.array(tris))
    return TriMesh(xy, tri, boundary, np.full(len(xy), float(m0)))


# calibrated so the Delaunay mean edge of a uniform disk packing matches the target
_PACKING_RADIUS = 0.78
_BOUNDARY_SAMPLES = 400


def velocity_target_lengths(speed: np.ndarray, min_len: float, max_len: float) -> np.ndarray:
    """Target edge length per node: shorter where ice moves faster.

    ``t = clamp(max_len * v_ref / max(v, v_ref), min_len, max_len)`` with the
    median speed as reference, so the slower half keeps ``max_len``.
    """
    speed = np.asarray(speed, dtype=np.float64)
    if not np.all(np.isfinite(speed)):
        raise MeshError("speed field contains non-finite values")
    if np.any(speed < 0):
        raise MeshError("speed field must be non-negative")
    if not (0 < min_len <= max_len):
        raise MeshError(f"need 0 < min_len <= max_len, got {min_len}, {max_len}")
    v_ref = float(np.median(speed))
    if v_ref <= 0.0:
        pos = speed[speed > 0]
        v_ref = float(pos.mean()) if len(pos) else 1.0
    t = max_len * v_ref / np.maximum(speed, v_ref)
    return np.clip(t, min_len, max_len)


def _boundary_points(domain: Rectangle, size_at) -> np.ndarray:
    corners = np.array(
        [[domain.xmin, domain.ymin], [domain.xmax, domain.ymin], [domain.xmax, domain.ymax], [domain.xmin, domain.ymax]]
    )
    pts = []
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        s = np.linspace(0.0, 1.0, _BOUNDARY_SAMPLES)
        samples = a + s[:, None] * (b - a)
        length = float(np.hypot(*(b - a)))
        dens = 1.0 / size_at(samples)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s) * length)])
        nseg = max(1, int(round(cum[-1])))
        targets = np.linspace(0.0, cum[-1], nseg + 1)[:-1]
        s_at = np.interp(targets, cum, s)
        pts.append(a + s_at[:, None] * (b - a))
    return np.concatenate(pts)


def mesh_from_size_field(domain: Rectangle, size_at, min_len: float, seed: int = 0) -> TriMesh:
    """Delaunay mesh of a rectangle whose local edge length follows ``size_at(points)``."""
    bpts = _boundary_points(domain, size_at)
    rng = np.random.default_rng(seed)
    step = min_len / 3.0
    xs = np.arange(domain.xmin + step / 2, domain.xmax, step)
    ys = np.arange(domain.ymin + step / 2, domain.ymax, step)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    cand = np.column_stack([gx.ravel(), gy.ravel()])
    cand += rng.uniform(-0.25, 0.25, size=cand.shape) * step
    t_cand = size_at(cand)
    order = np.argsort(t_cand, kind="stable")
    wall = np.minimum.reduce(
        [cand[:, 0] - domain.xmin, domain.xmax - cand[:, 0], cand[:, 1] - domain.ymin, domain.ymax - cand[:, 1]]
    )

    accepted = np.empty((len(bpts) + len(cand), 2))
    accepted[: len(bpts)] = bpts
    count = len(bpts)
    for c in order:
        r = _PACKING_RADIUS * t_cand[c]
        if wall[c] < 0.6 * r:
            continue
        d2 = np.sum((accepted[:count] - cand[c]) ** 2, axis=1)
        if d2.min() >= r * r:
            accepted[count] = cand[c]
            count += 1
    xy = accepted[:count]
    tri = _delaunay_rectangle(xy, domain)
    boundary = np.zeros(len(xy), dtype=bool)
    boundary[: len(bpts)] = True
    return TriMesh(xy, tri, boundary, size_at(xy))


def _delaunay_rectangle(xy: np.ndarray, domain: Rectangle) -> np.ndarray:
    # bulge boundary points outward a hair so collinear hull points stay vertices
    cx = 0.5 * (domain.xmin + domain.xmax)
    cy = 0.5 * (domain.ymin + domain.ymax)
    sx = (xy[:, 0] - domain.xmin) / domain.width
    sy = (xy[:, 1] - domain.ymin) / domain.height
    eps = 1e-6 * min(domain.width, domain.height)
    bulged = xy.copy()
    bulged[:, 0] += np.sign(xy[:, 0] - cx) * eps * np.sin(np.pi * sy) * (np.abs(np.abs(xy[:, 0] - cx) - domain.width / 2) < 1e-9)
    bulged[:, 1] += np.sign(xy[:, 1] - cy) * eps * np.sin(np.pi * sx) * (np.abs(np.abs(xy[:, 1] - cy) - domain.height / 2) < 1e-9)
    tri = Delaunay(bulged).simplices
    tri = _orient_ccw(xy, tri)
    area = signed_areas(xy, tri)
    keep = area > 1e-12 * domain.area
    if not keep.all():
        log.debug("dropping %d degenerate hull triangles", int((~keep).sum()))
        tri = tri[keep]
    used = np.zeros(len(xy), dtype=bool)
    used[tri.ravel()] = True
    if not used.all():
        raise MeshError(f"{int((~used).sum())} nodes were left out of the triangulation")
    return tri


def refine_by_velocity(mesh: TriMesh, speed: np.ndarray, min_len: float, max_len: float, seed: int = 0) -> TriMesh:
    """Re-mesh so that edge lengths shrink where ice flows faster.

    The size field lives on the old mesh; carry node fields across with
    :func:`transfer_field`.
    """
    speed = np.asarray(speed, dtype=np.float64)
    if speed.shape != (mesh.num_nodes,):
        raise MeshError(f"speed must have one value per node ({mesh.num_nodes}), got {speed.shape}")
    target = velocity_target_lengths(speed, min_len, max_len)
    domain = mesh.bounding_box

    def size_at(p):
        vals = transfer_field(mesh, target, p)
        return np.clip(vals, min_len, max_len)

    return mesh_from_size_field(domain, size_at, min_len, seed=seed)


# -- fields ---------------------------------------------------------------

def interpolate_node_field(mesh: TriMesh, values: np.ndarray, query_points: np.ndarray) -> np.ndarray:
    """Barycentric-linear interpolation of node values; NaN outside the mesh."""
    values = np.asarray(values, dtype=np.float64)
    pts = np.asarray(query_points, dtype=np.float64).reshape(-1, 2)
    which, lam = mesh.locate(pts)
    extra = values.shape[1:]
    out = np.full((len(pts),) + extra, np.nan)
    inside = which >= 0
    corner_vals = values[mesh.triangles[which[inside]]]
    out[inside] = np.einsum("qk,qk...->q...", lam[inside], corner_vals)
    # exact values at nodes
    dist, nearest = cKDTree(mesh.node_xy).query(pts)
    on_node = dist <= DUPLICATE_TOL
    out[on_node] = values[nearest[on_node]]
    return out


def transfer_field(src: TriMesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Interpolate onto arbitrary points, nearest-node where outside ``src``."""
    out = interpolate_node_field(src, values, points)
    missing = np.isnan(out).reshape(len(out), -1).any(axis=1)
    if missing.any():
        _, nearest = cKDTree(src.node_xy).query(np.asarray(points).reshape(-1, 2)[missing])
        out[missing] = np.asarray(values)[nearest]
    return out


# -- graph view -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GraphTopology:
    """Directed edge list derived from a mesh, including one self pair per node.

    ``edges[k] = (i, j)`` means node ``i`` receives from node ``j``; rows are
    grouped by ``i`` so each node's neighbourhood is contiguous and
    ``neighbor_index[i]:neighbor_index[i+1]`` slices it.  Within a
    neighbourhood, edges run by distance and then by the neighbour's
    coordinates, never by label, so sums over a neighbourhood are evaluated
    in the same order under any relabelling of the nodes.
    """

    num_nodes: int
    edges: np.ndarray
    edge_distance: np.ndarray
    neighbor_index: np.ndarray
    node_xy: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 1]

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.neighbor_index)

    @cached_property
    def self_mask(self) -> np.ndarray:
        return self.edges[:, 0] == self.edges[:, 1]

    def neighbors(self, i: int) -> np.ndarray:
        return self.edges[self.neighbor_index[i]:self.neighbor_index[i + 1], 1]

    def permuted(self, perm: np.ndarray) -> GraphTopology:
        """Graph of the same mesh with node ``k`` relabelled as ``inv[k]`` where ``perm[inv[k]] = k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        e = inv[self.edges]
        return _build_topology(self.node_xy[perm], e)


def _build_topology(xy: np.ndarray, directed: np.ndarray) -> GraphTopology:
    n = len(xy)
    e = np.unique(directed, axis=0)
    d = xy[e[:, 0]] - xy[e[:, 1]]
    dist = np.hypot(d[:, 0], d[:, 1])
    order = np.lexsort((xy[e[:, 1], 1], xy[e[:, 1], 0], dist, e[:, 0]))
    e, dist = e[order], dist[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(e[:, 0], minlength=n), out=indptr[1:])
    for a in (e, dist, indptr):
        a.setflags(write=False)
    xy = _freeze(xy)
    return GraphTopology(n, e, dist, indptr, xy)


def graph_from_pairs(node_xy: np.ndarray, pairs: np.ndarray) -> GraphTopology:
    """Graph over undirected node ``pairs``: both directions of each pair plus one self pair per node."""
    xy = np.asarray(node_xy, dtype=np.float64)
    und = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    loops = np.repeat(np.arange(len(xy))[:, None], 2, axis=1)
    return _build_topology(xy, np.concatenate([und, und[:, ::-1], loops]))


def mesh_to_graph(mesh: TriMesh) -> GraphTopology:
    """Nodes joined by a mesh edge become neighbours in both directions; every node neighbours itself."""
    return graph_from_pairs(mesh.node_xy, mesh.edges)


def edge_count_from_boundary(num_triangles: int, num_boundary_edges: int) -> int:
    """Undirected edge count of a triangulated disk: every interior edge is shared by two triangles."""
    return (3 * num_triangles + num_boundary_edges) // 2


# -- serialization --------------------------------------------------------

def write_mesh(mesh: TriMesh, path: str | Path) -> None:
    lines = [f"nodes {mesh.num_nodes} triangles {mesh.num_triangles}"]
    for (x, y), b in zip(mesh.node_xy.tolist(), mesh.boundary.tolist()):
        lines.append(f"{x!r} {y!r} {int(b)}")
    for i, j, k in mesh.triangles.tolist():
        lines.append(f"{i} {j} {k}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> TriMesh:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if len(head) != 4 or head[0] != "nodes" or head[2] != "triangles":
        raise MeshError(f"{path}: bad header {text[0]!r}")
    n, t = int(head[1]), int(head[3])
    node_rows = [line.split() for line in text[1:1 + n]]
    tri_rows = [line.split() for line in text[1 + n:1 + n + t]]
    if len(node_rows) != n or len(tri_rows) != t:
        raise MeshError(f"{path}: truncated file")
    xy = np.array([[float(r[0]), float(r[1])] for r in node_rows])
    bnd = np.array([r[2] == "1" for r in node_rows], dtype=bool)
    tri = np.array([[int(v) for v in r] for r in tri_rows], dtype=np.int64)
    return TriMesh(xy, tri, bnd)


def side_masks(mesh: TriMesh, tol: float = 1e-6) -> dict[str, np.ndarray]:
    """Boundary nodes on each side of the bounding rectangle (west/east/south/north)."""
    box = mesh.bounding_box
    x, y = mesh.node_xy[:, 0], mesh.node_xy[:, 1]
    scale = tol * max(box.width, box.height)
    return {
        "west": mesh.boundary & (np.abs(x - box.xmin) <= scale),
        "east": mesh.boundary & (np.abs(x - box.xmax) <= scale),
        "south": mesh.boundary & (np.abs(y - box.ymin) <= scale),
        "north": mesh.boundary & (np.abs(y - box.ymax) <= scale),
    }
