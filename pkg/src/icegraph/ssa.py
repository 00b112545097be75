"""Shallow-shelf ice-flow solver on P1 triangles and its transient driver.

Units: metres, years, pascals.  Viscosity is in Pa*yr and the rate factor in
Pa*yr^(1/n).  Basal drag follows a linear Budd law, ``C * N * u`` with N the
effective pressure, so ``friction_coeff`` is in yr/m.

The domain is the mesh bounding rectangle: the west side is the inland
(no-flow) boundary, the east side is the calving front, and north/south are
free-slip walls.  Inside the domain only elements fully covered by ice and
held by grounded or inland ice take part in the momentum balance; ice edges
facing open water carry the same front traction as the east side.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .mesh import Rectangle, TriMesh, generate_initial_mesh, refine_by_velocity, side_masks

log = logging.getLogger(__name__)

SECONDS_PER_YEAR = 365.2422 * 86400.0

# desk-scale fjord: 160 km along flow, 80 km across
DESK_DOMAIN = Rectangle(0.0, 160e3, 0.0, 80e3)
# velocity refinement bounds as multiples of the initial mesh size
REFINE_MIN, REFINE_MAX = 0.75, 1.5


class ConvergenceError(RuntimeError):
    """Picard iteration failed to converge; ``history`` holds the relative changes."""

    def __init__(self, message: str, history: list[float]):
        super().__init__(f"{message}; history={['%.3g' % h for h in history]}")
        self.history = history


class SimulationError(RuntimeError):
    """A transient step failed; ``step`` is the zero-based step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class PhysicsParams:
    rho_ice: float = 917.0
    rho_water: float = 1028.0
    g: float = 9.81
    glen_n: float = 3.0
    # 1.6e8 Pa s^(1/3) expressed per year
    glen_B: float = 1.6e8 * SECONDS_PER_YEAR ** (-1.0 / 3.0)
    # Budd law: basal drag = friction_coeff * N * u, N the effective pressure (yr/m)
    friction_coeff: float = 2.0e-4
    eps_reg: float = 1e-8
    min_thickness: float = 1.0

    def __post_init__(self):
        for name in ("rho_ice", "rho_water", "g", "glen_n", "glen_B", "friction_coeff", "eps_reg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    melt_rate: float = 0.0
    smb: float = 0.3
    duration: float = 20.0
    dt: float = 1.0 / 12.0
    m0: float = 20e3

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        steps = self.duration / self.dt
        if self.duration <= 0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"duration {self.duration} is not a positive multiple of dt {self.dt}")

    @property
    def num_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass(frozen=True, eq=False)
class GlacierState:
    H: np.ndarray
    u: np.ndarray
    v: np.ndarray
    s: np.ndarray
    b: np.ndarray
    floating: np.ndarray
    time: float = 0.0

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def flotation(H: np.ndarray, b: np.ndarray, params: PhysicsParams) -> tuple[np.ndarray, np.ndarray]:
    """Floating mask and surface elevation from thickness and bed (sea level 0)."""
    floating = params.rho_ice * H < params.rho_water * (-b)
    s = np.where(floating, H * (1.0 - params.rho_ice / params.rho_water), b + H)
    return floating, s


def make_state(H, b, params: PhysicsParams, u=None, v=None, time: float = 0.0) -> GlacierState:
    H = np.maximum(np.asarray(H, dtype=np.float64), 0.0)
    b = np.asarray(b, dtype=np.float64)
    floating, s = flotation(H, b, params)
    z = np.zeros_like(H)
    return GlacierState(H, z.copy() if u is None else np.asarray(u, float),
                        z.copy() if v is None else np.asarray(v, float), s, b, floating, time)


# -- geometry --------------------------------------------------------------

@dataclass(frozen=True)
class GlacierProfile:
    """Synthetic marine glacier in a fjord: bed deepening towards the east.

    Positions are fractions of the domain width.  The grounded surface is a
    parabola meeting the flotation surface at ``grounding_line`` with slope
    ``grounding_slope``; beyond it the shelf thins linearly to
    ``thickness_ocean``.  The fjord walls (``margin_rise``, capped at
    ``bed_max``) ground the shelf edges so the shelf buttresses the inland ice.
    """

    bed_inland: float = 200.0
    bed_ocean: float = -800.0
    trough_depth: float = 150.0
    thickness_inland: float = 2500.0
    thickness_ocean: float = 300.0
    grounding_line: float = 0.8
    grounding_slope: float = 5e-4
    margin_rise: float = 2000.0
    margin_sharpness: float = 6.0
    bed_max: float = 600.0
    basin_depth: float = 800.0
    basin_center: float = 0.6
    basin_width: float = 0.12


def synthesize_initial_glacier(domain: Rectangle, mesh: TriMesh, profile: GlacierProfile = GlacierProfile(),
                               params: PhysicsParams = PhysicsParams()) -> GlacierState:
    """Evaluate the synthetic geometry on the mesh nodes.

    The fjord walls rise by ``margin_rise`` (scaled with distance from the
    divide) so the shelf stays grounded along its lateral margins.
    """
    x = (mesh.node_xy[:, 0] - domain.xmin) / domain.width
    y = (mesh.node_xy[:, 1] - domain.ymin) / domain.height
    b_line = profile.bed_inland + (profile.bed_ocean - profile.bed_inland) * x
    across = np.abs(2.0 * y - 1.0)
    basin = profile.basin_depth * np.exp(-(((x - profile.basin_center) / profile.basin_width) ** 2))
    b = b_line - basin + x * (profile.margin_rise * across ** profile.margin_sharpness
                      - profile.trough_depth * (1.0 - across ** 2))
    b = np.minimum(b, profile.bed_max)

    xg = profile.grounding_line
    ratio = params.rho_water / params.rho_ice
    b_g = (profile.bed_inland + (profile.bed_ocean - profile.bed_inland) * xg - profile.trough_depth * xg
           - profile.basin_depth * math.exp(-(((xg - profile.basin_center) / profile.basin_width) ** 2)))
    H_g = -b_g * ratio  # flotation thickness on the trough axis at the grounding line
    if H_g <= 0:
        raise ValueError("grounding line must sit on a bed below sea level")
    s_div = profile.bed_inland + profile.thickness_inland
    s_g = H_g * (1.0 - 1.0 / ratio)
    # quadratic surface, gentle at the grounding line (where it must still
    # out-climb the flotation surface) and steeper towards the divide
    slope_g = profile.grounding_slope * domain.width
    curv = (s_div - s_g - slope_g * xg) / xg ** 2
    s_line = s_g + slope_g * (xg - x) + curv * (xg - x) ** 2
    H_shelf = H_g + (profile.thickness_ocean - H_g) * (x - xg) / (1.0 - xg)
    H = np.where(x <= xg, np.maximum(s_line - b, 0.0), H_shelf)
    return make_state(H, b, params)


# -- stress balance ------------------------------------------------------

def effective_pressure(state: GlacierState, params: PhysicsParams) -> np.ndarray:
    """Overburden minus basal water pressure in Pa, zero where the ice floats."""
    N = params.g * (params.rho_ice * state.H + params.rho_water * np.minimum(state.b, 0.0))
    return np.where(state.floating, 0.0, np.maximum(N, 0.0))


def strain_rates(mesh: TriMesh, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Element-constant (exx, eyy, exy)."""
    grad = mesh.basis_gradients
    ut = u[mesh.triangles]
    vt = v[mesh.triangles]
    ux = np.einsum("tk,tk->t", ut, grad[..., 0])
    uy = np.einsum("tk,tk->t", ut, grad[..., 1])
    vx = np.einsum("tk,tk->t", vt, grad[..., 0])
    vy = np.einsum("tk,tk->t", vt, grad[..., 1])
    return ux, vy, 0.5 * (uy + vx)


def effective_viscosity(state: GlacierState, mesh: TriMesh, params: PhysicsParams) -> np.ndarray:
    """Glen's-law viscosity per element, ``B / (2 eps_e^((n-1)/n))``."""
    exx, eyy, exy = strain_rates(mesh, state.u, state.v)
    eps_e = np.sqrt(exx ** 2 + eyy ** 2 + exx * eyy + exy ** 2)
    eps_e = np.maximum(eps_e, params.eps_reg)
    return params.glen_B / (2.0 * eps_e ** ((params.glen_n - 1.0) / params.glen_n))


def _anchored_ice(mesh: TriMesh, H: np.ndarray, min_thickness: float, anchor: np.ndarray) -> np.ndarray:
    """Elements that carry momentum: fully ice-covered and rigidly held.

    Only elements whose nodes all exceed ``min_thickness`` count as ice.  An
    element is held when two of its nodes are anchored (grounded or inland)
    or when it shares an edge with a held element; pieces hanging by a single
    node or drifting free have undetermined rigid motion and are dropped.
    """
    tri = mesh.triangles
    covered = H[tri].min(axis=1) > min_thickness
    idx = np.flatnonzero(covered)
    if idx.size == 0:
        return covered
    t = tri[idx]
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    owner = np.tile(np.arange(len(t)), 3)
    _, edge_id = np.unique(np.sort(directed, axis=1), axis=0, return_inverse=True)
    edge_id = edge_id.ravel()
    # element-element adjacency through shared edges
    inc = sparse.coo_matrix((np.ones(len(owner)), (owner, edge_id))).tocsr()
    adj = inc @ inc.T
    _, label = connected_components(adj, directed=False)
    seeds = anchor[t].sum(axis=1) >= 2
    held = np.isin(label, np.unique(label[seeds]))
    active = np.zeros(len(tri), dtype=bool)
    active[idx[held]] = True
    return active


def _front_edges(mesh: TriMesh, active: np.ndarray, east: np.ndarray, bed: np.ndarray) -> np.ndarray:
    """Directed (CCW) edges of the active region that face open water.

    Domain-boundary edges count only on the calving (east) side.  Interior
    rim edges count when the ice-free element across them lies below sea
    level; rims against bare land are left traction-free.
    """
    tri = mesh.triangles
    directed = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    owner = np.tile(np.arange(len(tri)), 3)
    _, inv = np.unique(np.sort(directed, axis=1), axis=0, return_inverse=True)
    inv = inv.ravel()
    # owning triangles of each undirected edge; the second slot stays -1 on the domain boundary
    order = np.argsort(inv, kind="stable")
    sorted_inv = inv[order]
    start = np.ones(len(order), dtype=bool)
    start[1:] = sorted_inv[1:] != sorted_inv[:-1]
    first = np.full(inv.max() + 1, -1)
    second = np.full(inv.max() + 1, -1)
    first[sorted_inv[start]] = owner[order[start]]
    second[sorted_inv[~start]] = owner[order[~start]]
    other = np.where(first[inv] == owner, second[inv], first[inv])
    keep = np.zeros(len(directed), dtype=bool)
    on_active = active[owner]
    outer = other < 0
    a, b = directed[:, 0], directed[:, 1]
    keep |= on_active & outer & east[a] & east[b]
    wet = np.zeros(len(directed), dtype=bool)
    inner = ~outer
    wet[inner] = bed[tri[other[inner]]].mean(axis=1) < 0.0
    keep |= on_active & inner & ~active[np.maximum(other, 0)] & wet
    return directed[keep]


class _StressAssembler:
    """Pieces of the SSA system that do not change between Picard iterations."""

    def __init__(self, mesh: TriMesh, state: GlacierState, params: PhysicsParams):
        self.mesh = mesh
        n = mesh.num_nodes
        sides = side_masks(mesh)
        beta_nodal = params.friction_coeff * (mesh.mass_matrix @ effective_pressure(state, params))
        active = _anchored_ice(mesh, state.H, params.min_thickness, (beta_nodal > 0) | sides["west"])
        tri = mesh.triangles[active]
        grad = mesh.basis_gradients[active]
        gx, gy = grad[..., 0], grad[..., 1]
        area = mesh.areas[active]

        H = state.H
        self.H_elem = H[tri].mean(axis=1)
        s_t = state.s[tri]
        sx = np.einsum("tk,tk->t", s_t, gx)
        sy = np.einsum("tk,tk->t", s_t, gy)
        drive = params.rho_ice * params.g * self.H_elem * area / 3.0
        fx = np.zeros(n)
        fy = np.zeros(n)
        np.add.at(fx, tri.ravel(), np.repeat(-drive * sx, 3))
        np.add.at(fy, tri.ravel(), np.repeat(-drive * sy, 3))

        # ice-front traction (depth-integrated overburden minus water pressure) on the
        # calving side and wherever the ice region borders ice-free elements
        depth = np.maximum(0.0, -(state.s - H))
        trac = 0.5 * params.g * (params.rho_ice * H ** 2 - params.rho_water * depth ** 2)
        for a, b in _front_edges(mesh, active, sides["east"], state.b):
            pa, pb = mesh.node_xy[a], mesh.node_xy[b]
            length = float(np.hypot(*(pb - pa)))
            tangent = (pb - pa) / length
            normal = np.array([tangent[1], -tangent[0]])  # outward for CCW boundary
            fa = length * (2.0 * trac[a] + trac[b]) / 6.0
            fb = length * (trac[a] + 2.0 * trac[b]) / 6.0
            fx[a] += fa * normal[0]
            fy[a] += fa * normal[1]
            fx[b] += fb * normal[0]
            fy[b] += fb * normal[1]
        self.rhs = np.concatenate([fx, fy])

        # Budd drag from the P1 effective pressure, lumped per node; N vanishes at flotation
        self.friction = sparse.diags(np.concatenate([beta_nodal, beta_nodal]))

        # per-element geometric blocks of the viscous operator, scaled by H*mu*area later
        ax, ay = gx[:, :, None], gy[:, :, None]
        bx, by = gx[:, None, :], gy[:, None, :]
        self.k_uu = 4 * ax * bx + ay * by
        self.k_uv = 2 * ax * by + ay * bx
        self.k_vu = 2 * ay * bx + ax * by
        self.k_vv = 4 * ay * by + ax * bx
        self.rows = np.repeat(tri, 3, axis=1).ravel()
        self.cols = np.tile(tri, (1, 3)).ravel()
        self.area = area
        self.active = active

        ice_free = np.ones(n, dtype=bool)
        ice_free[tri.ravel()] = False
        fixed_u = sides["west"] | ice_free
        fixed_v = sides["west"] | sides["north"] | sides["south"] | ice_free
        fixed = np.concatenate([fixed_u, fixed_v])
        self.free = np.flatnonzero(~fixed)
        self.n = n

    def matrix(self, mu: np.ndarray) -> sparse.csr_matrix:
        w = (self.H_elem * mu[self.active] * self.area)[:, None, None]
        n = self.n
        r, c = self.rows, self.cols
        blocks = [
            (self.k_uu, r, c), (self.k_uv, r, c + n),
            (self.k_vu, r + n, c), (self.k_vv, r + n, c + n),
        ]
        data = np.concatenate([(w * k).ravel() for k, _, _ in blocks])
        rows = np.concatenate([rr for _, rr, _ in blocks])
        cols = np.concatenate([cc for _, _, cc in blocks])
        k = sparse.coo_matrix((data, (rows, cols)), shape=(2 * n, 2 * n)).tocsr()
        return k + self.friction

    def solve(self, mu: np.ndarray) -> np.ndarray:
        k = self.matrix(mu)
        free = self.free
        sol = np.zeros(2 * self.n)
        if free.size == 0:
            return sol
        kff = k[free][:, free].tocsc()
        sol[free] = spsolve(kff, self.rhs[free])
        if not np.all(np.isfinite(sol)):
            raise FloatingPointError("linear stress-balance solve produced non-finite velocities")
        return sol


def solve_stress_balance(state: GlacierState, mesh: TriMesh, params: PhysicsParams = PhysicsParams(),
                         tol: float = 1e-4, max_iter: int = 50,
                         initial_strain_rate: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Picard iteration on viscosity for the SSA momentum balance.

    Starts from the velocities carried by ``state``; if those are all zero
    the first viscosity uses ``initial_strain_rate`` instead of the floor.
    """
    asm = _StressAssembler(mesh, state, params)
    n = mesh.num_nodes
    u, v = state.u.copy(), state.v.copy()
    if np.any(u) or np.any(v):
        mu = effective_viscosity(replace(state, u=u, v=v), mesh, params)
    else:
        eps0 = max(initial_strain_rate, params.eps_reg)
        mu = np.full(mesh.num_triangles, params.glen_B / (2.0 * eps0 ** ((params.glen_n - 1) / params.glen_n)))
    history: list[float] = []
    for _ in range(max_iter):
        sol = asm.solve(mu)
        u_new, v_new = sol[:n], sol[n:]
        scale = max(np.max(np.hypot(u_new, v_new)), 1e-12)
        change = max(np.max(np.abs(u_new - u)), np.max(np.abs(v_new - v))) / scale
        history.append(float(change))
        u, v = u_new, v_new
        if change < tol:
            return u, v
        mu = effective_viscosity(replace(state, u=u, v=v), mesh, params)
    raise ConvergenceError(f"Picard iteration did not reach tol={tol} in {max_iter} iterations", history)


# -- mass transport ------------------------------------------------------

def _transport_matrices(mesh: TriMesh, u: np.ndarray, v: np.ndarray, dt: float):
    """Galerkin flux-divergence operator plus SUPG terms for backward Euler."""
    tri = mesh.triangles
    grad = mesh.basis_gradients
    area = mesh.areas
    ut, vt = u[tri], v[tri]
    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0  # int(phi_a phi_c) / area

    # int phi_a (vel . grad phi_b) = sum_c M_ac vel_c . grad phi_b
    vel_a = np.einsum("ac,tc->ta", local_mass, ut)[..., None] * area[:, None, None]
    wel_a = np.einsum("ac,tc->ta", local_mass, vt)[..., None] * area[:, None, None]
    adv = vel_a * grad[:, None, :, 0] + wel_a * grad[:, None, :, 1]
    div = np.einsum("tk,tk->t", ut, grad[..., 0]) + np.einsum("tk,tk->t", vt, grad[..., 1])
    adv = adv + div[:, None, None] * local_mass[None] * area[:, None, None]

    # SUPG: tau * (vbar . grad phi_a) * integral of the residual
    ubar, vbar = ut.mean(axis=1), vt.mean(axis=1)
    speed = np.hypot(ubar, vbar)
    h = np.sqrt(2.0 * area)
    tau = 1.0 / np.sqrt((2.0 / dt) ** 2 + (2.0 * speed / h) ** 2)
    stream = tau[:, None] * (ubar[:, None] * grad[..., 0] + vbar[:, None] * grad[..., 1])  # (T, 3)
    # residual integrals: int dH/dt -> area/3 per node; int div(Hv) -> flux weights
    hgrad_weight = area[:, None] * (ubar[:, None] * grad[..., 0] + vbar[:, None] * grad[..., 1]) \
        + (div * area / 3.0)[:, None]
    supg_mass = stream[:, :, None] * (area / 3.0)[:, None, None] * np.ones((1, 1, 3))
    supg_adv = stream[:, :, None] * hgrad_weight[:, None, :]

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    shape = (mesh.num_nodes,) * 2
    build = lambda vals: sparse.coo_matrix((vals.ravel(), (rows, cols)), shape=shape).tocsr()
    return build(adv), build(supg_mass), build(supg_adv)


def melt_mask(mesh: TriMesh, floating: np.ndarray) -> np.ndarray:
    """Nodes of every element touching floating ice (full grounding-zone melt)."""
    touched = floating[mesh.triangles].any(axis=1)
    mask = np.zeros(mesh.num_nodes, dtype=bool)
    mask[mesh.triangles[touched].ravel()] = True
    return mask


def advance_thickness(state: GlacierState, mesh: TriMesh, scenario: ScenarioConfig,
                      params: PhysicsParams = PhysicsParams()) -> GlacierState:
    """One backward-Euler SUPG step of dH/dt + div(H v) = smb - melt.

    Melt applies on every element that touches floating ice (see
    ``melt_mask``).  If the advective Courant number exceeds one the step is
    split into equal sub-steps.
    """
    dt = scenario.dt
    speed = np.hypot(state.u, state.v)
    cfl = float(speed.max()) * dt / float(mesh.edge_lengths.min())
    substeps = 1
    if cfl > 1.0:
        substeps = int(math.ceil(cfl))
        warnings.warn(f"Courant number {cfl:.2f} > 1; using {substeps} sub-steps", RuntimeWarning, stacklevel=2)
    h = dt / substeps
    adv, supg_mass, supg_adv = _transport_matrices(mesh, state.u, state.v, h)
    mass = mesh.mass_matrix
    source = scenario.smb - scenario.melt_rate * melt_mask(mesh, state.floating).astype(np.float64)
    lhs = (mass + supg_mass + h * (adv + supg_adv)).tocsc()
    src_vec = mass @ source + supg_mass @ source
    H = state.H.copy()
    for _ in range(substeps):
        rhs = (mass + supg_mass) @ H + h * src_vec
        H = spsolve(lhs, rhs)
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("thickness update produced non-finite values")
    H = np.maximum(H, 0.0)
    floating, s = flotation(H, state.b, params)
    return GlacierState(H, state.u, state.v, s, state.b, floating, state.time + dt)


def run_transient(scenario: ScenarioConfig, initial: GlacierState, mesh: TriMesh,
                  params: PhysicsParams = PhysicsParams()) -> list[GlacierState]:
    """Alternate thickness transport and stress balance; one stored state per step.

    ``initial`` should already carry a balanced velocity field; stored state
    ``k`` is the glacier after ``k + 1`` steps.
    """
    states = []
    state = initial
    for step in range(scenario.num_steps):
        try:
            state = advance_thickness(state, mesh, scenario, params)
            u, v = solve_stress_balance(state, mesh, params)
        except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
            raise SimulationError(step, exc) from exc
        state = replace(state, u=u, v=v)
        states.append(state)
    return states


def diagnostic_state(state: GlacierState, mesh: TriMesh, params: PhysicsParams = PhysicsParams()) -> GlacierState:
    u, v = solve_stress_balance(state, mesh, params)
    return replace(state, u=u, v=v)


def total_volume(mesh: TriMesh, H: np.ndarray) -> float:
    """Ice volume in m^3 (P1 integral of thickness)."""
    return float(np.dot(mesh.nodal_areas, H))


def prepare_glacier(m0: float, domain: Rectangle = DESK_DOMAIN, profile: GlacierProfile = GlacierProfile(),
                    params: PhysicsParams = PhysicsParams(), seed: int = 0) -> tuple[TriMesh, GlacierState]:
    """Initial mesh, diagnostic solve, one velocity refinement, then a balanced state on the final mesh."""
    coarse = generate_initial_mesh(domain, m0, seed=seed)
    first = diagnostic_state(synthesize_initial_glacier(domain, coarse, profile, params), coarse, params)
    mesh = refine_by_velocity(coarse, first.speed, REFINE_MIN * m0, REFINE_MAX * m0, seed=seed)
    state = diagnostic_state(synthesize_initial_glacier(domain, mesh, profile, params), mesh, params)
    log.info("prepared glacier m0=%.0f: %d nodes, %d floating", m0, mesh.num_nodes, int(state.floating.sum()))
    return mesh, state


def mean_speed(mesh: TriMesh, state: GlacierState) -> float:
    """Area-weighted mean nodal speed in m/yr."""
    w = mesh.nodal_areas
    return float(np.dot(w, state.speed) / w.sum())
