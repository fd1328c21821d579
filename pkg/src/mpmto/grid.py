"""Background grid, material points and GIMP basis functions.

Nodes of the structured grid are numbered ``ix + iy * (nx + 1)``; degree of
freedom ``2 * node + axis`` holds the displacement along ``axis`` (0 = x).
Particle domain lengths ``l`` are full lengths, so the support of a node
extends over ``|x_p - X_v| < h + l / 2`` along each axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridEscapeError

SUPPORT_TOL = 1e-9


@dataclass
class BackgroundGrid:
    origin: np.ndarray
    h: float
    num_cells: tuple[int, int]
    dirichlet: np.ndarray = None
    prescribed_disp: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        self.num_cells = (int(self.num_cells[0]), int(self.num_cells[1]))
        if not self.h > 0:
            raise ConfigError("grid.h", "cell size must be positive")
        if min(self.num_cells) < 1:
            raise ConfigError("grid.num_cells", "need at least one cell per axis")
        if self.dirichlet is None:
            self.dirichlet = np.zeros((self.n_nodes, 2), dtype=bool)
        if self.prescribed_disp is None:
            self.prescribed_disp = np.zeros((self.n_nodes, 2))

    @property
    def nodes_per_axis(self) -> tuple[int, int]:
        return self.num_cells[0] + 1, self.num_cells[1] + 1

    @property
    def n_nodes(self) -> int:
        nx1, ny1 = self.nodes_per_axis
        return nx1 * ny1

    @property
    def node_coords(self) -> np.ndarray:
        nx1, ny1 = self.nodes_per_axis
        ix, iy = np.meshgrid(np.arange(nx1), np.arange(ny1), indexing="xy")
        xy = np.stack([ix.ravel(), iy.ravel()], axis=1) * self.h
        return self.origin + xy

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.h * np.asarray(self.num_cells, dtype=float)

    def node_index(self, ix, iy):
        return np.asarray(ix) + np.asarray(iy) * self.nodes_per_axis[0]

    def fix(self, predicate, axes=(0, 1), value=(0.0, 0.0)):
        """Constrain every node whose coordinates satisfy ``predicate(x, y)``."""
        xy = self.node_coords
        mask = np.asarray(predicate(xy[:, 0], xy[:, 1]), dtype=bool)
        for ax in axes:
            self.dirichlet[mask, ax] = True
            self.prescribed_disp[mask, ax] = value[ax]
        return int(mask.sum())


# --------------------------------------------------------------------------
# design-domain geometry

@dataclass(frozen=True)
class Rectangle:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def bounds(self):
        return self.x0, self.y0, self.x1, self.y1

    def contains(self, pts):
        pts = np.asarray(pts)
        x, y = pts[..., 0], pts[..., 1]
        return (x > self.x0) & (x < self.x1) & (y > self.y0) & (y < self.y1)

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple

    @property
    def bounds(self):
        v = np.asarray(self.vertices, dtype=float)
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def contains(self, pts):
        # even-odd ray casting
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        v = np.asarray(self.vertices, dtype=float)
        inside = np.zeros(x.shape, dtype=bool)
        for (xa, ya), (xb, yb) in zip(v, np.roll(v, -1, axis=0)):
            crosses = (ya > y) != (yb > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = xa + (y - ya) * (xb - xa) / (yb - ya)
            inside ^= crosses & (x < xi)
        return inside

    @property
    def area(self):
        v = np.asarray(self.vertices, dtype=float)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


# --------------------------------------------------------------------------
# material points

@dataclass
class MaterialPointSet:
    """Lagrangian particles. ``x``, ``F`` and ``l`` are the mutable state."""

    X0: np.ndarray
    V0: np.ndarray
    l0: np.ndarray
    x: np.ndarray = None
    F: np.ndarray = None
    l: np.ndarray = None
    f_ext: np.ndarray = None
    body_force: np.ndarray = None
    design_index: np.ndarray = None
    thickness: float = 1.0

    def __post_init__(self):
        n = len(self.X0)
        self.X0 = np.asarray(self.X0, dtype=float).reshape(n, 2)
        self.V0 = np.asarray(self.V0, dtype=float).reshape(n)
        self.l0 = np.asarray(self.l0, dtype=float).reshape(n, 2)
        if self.x is None:
            self.x = self.X0.copy()
        if self.F is None:
            self.F = np.tile(np.eye(2), (n, 1, 1))
        if self.l is None:
            self.l = self.l0.copy()
        if self.f_ext is None:
            self.f_ext = np.zeros((n, 2))
        if self.body_force is None:
            self.body_force = np.zeros((n, 2))
        if self.design_index is None:
            self.design_index = np.arange(n)
        if n and not np.all(self.V0 > 0):
            raise ConfigError("points.V0", "initial volumes must be positive")

    def __len__(self):
        return len(self.X0)

    @property
    def V(self):
        return np.linalg.det(self.F) * self.V0

    def masses(self, rho):
        return np.asarray(rho) * self.V0

    def copy(self) -> "MaterialPointSet":
        return MaterialPointSet(
            X0=self.X0.copy(), V0=self.V0.copy(), l0=self.l0.copy(),
            x=self.x.copy(), F=self.F.copy(), l=self.l.copy(),
            f_ext=self.f_ext.copy(), body_force=self.body_force.copy(),
            design_index=self.design_index.copy(), thickness=self.thickness)

    def reset(self):
        """Return every particle to its reference configuration."""
        self.x = self.X0.copy()
        self.F = np.tile(np.eye(2), (len(self), 1, 1))
        self.l = self.l0.copy()

    def nearest(self, point) -> int:
        """Index of the particle closest to ``point``; lowest index wins ties."""
        d2 = np.sum((self.X0 - np.asarray(point, dtype=float)) ** 2, axis=1)
        return int(np.argmin(d2))


def populate_domain(domain, grid: BackgroundGrid, pts_per_cell: int,
                    thickness: float = 1.0) -> MaterialPointSet:
    """Seed particles at the centres of a uniform ``pts x pts`` split of each cell.

    Only subdivision centres strictly inside ``domain`` are kept; no
    partial-coverage correction is applied so every particle carries
    ``V0 = (h / pts)**2 * thickness``.
    """
    if pts_per_cell < 1:
        raise ConfigError("points.per_cell", "need at least one point per cell")
    x0, y0, x1, y1 = domain.bounds
    lo, hi = grid.origin, grid.upper
    if x0 < lo[0] or y0 < lo[1] or x1 > hi[0] or y1 > hi[1]:
        raise ConfigError("domain", f"domain bounds {domain.bounds} exceed grid "
                          f"[{lo[0]}, {hi[0]}] x [{lo[1]}, {hi[1]}]")
    d = grid.h / pts_per_cell
    nsx = grid.num_cells[0] * pts_per_cell
    nsy = grid.num_cells[1] * pts_per_cell
    # only subdivisions overlapping the bounding box
    ix = np.arange(max(0, int(np.floor((x0 - lo[0]) / d)) - 1),
                   min(nsx, int(np.ceil((x1 - lo[0]) / d)) + 1))
    iy = np.arange(max(0, int(np.floor((y0 - lo[1]) / d)) - 1),
                   min(nsy, int(np.ceil((y1 - lo[1]) / d)) + 1))
    gx, gy = np.meshgrid(lo[0] + (ix + 0.5) * d, lo[1] + (iy + 0.5) * d, indexing="xy")
    centres = np.stack([gx.ravel(), gy.ravel()], axis=1)
    keep = domain.contains(centres)
    X0 = centres[keep]
    n = len(X0)
    return MaterialPointSet(X0=X0, V0=np.full(n, d * d * thickness),
                            l0=np.full((n, 2), d), thickness=thickness)


# --------------------------------------------------------------------------
# GIMP basis

def gimp_basis_1d(delta, h, l):
    """Five-branch GIMP weight for relative position ``delta = x_p - X_v``.

    Valid for ``l <= h``; wider particle domains fall back to the equivalent
    hat-function convolution.
    """
    delta = np.asarray(delta, dtype=float)
    if l > h:
        out = gimp_1d(delta, h, l)[0]
        return out if out.ndim else float(out)
    half = 0.5 * l
    out = np.select(
        [(-h - half < delta) & (delta <= -h + half),
         (-h + half < delta) & (delta <= -half),
         (-half < delta) & (delta <= half),
         (half < delta) & (delta <= h - half),
         (h - half < delta) & (delta <= h + half)],
        [(h + half + delta) ** 2 / (2.0 * h * l),
         1.0 + delta / h,
         1.0 - (delta ** 2 + half ** 2) / (h * l),
         1.0 - delta / h,
         (h + half - delta) ** 2 / (2.0 * h * l)],
        default=0.0)
    return out if out.ndim else float(out)


def _hat(s, h):
    return np.maximum(0.0, 1.0 - np.abs(s) / h)


def _hat_slope(s, h):
    return np.where(np.abs(s) < h, -np.sign(s) / h, 0.0)


def _hat_antiderivative(s, h):
    s = np.clip(s, -h, h)
    return np.where(s <= 0.0, (s + h) ** 2 / (2.0 * h), h - (h - s) ** 2 / (2.0 * h))


def gimp_1d(delta, h, l, second_order=False):
    """GIMP weight as the domain average of the linear hat function.

    Returns ``(S, dS/ddelta)`` and, with ``second_order``, additionally
    ``d2S/ddelta2``, ``dS/dl`` and ``d2S/(ddelta dl)``. Works elementwise on
    arrays; ``l`` may be an array broadcastable against ``delta``.
    """
    a = delta + 0.5 * l
    b = delta - 0.5 * l
    inv_l = 1.0 / l
    S = (_hat_antiderivative(a, h) - _hat_antiderivative(b, h)) * inv_l
    Na, Nb = _hat(a, h), _hat(b, h)
    dS = (Na - Nb) * inv_l
    if not second_order:
        return S, dS
    sa, sb = _hat_slope(a, h), _hat_slope(b, h)
    d2S = (sa - sb) * inv_l
    dS_dl = (0.5 * (Na + Nb) - S) * inv_l
    d2S_dl = (0.5 * (sa + sb) - dS) * inv_l
    return S, dS, d2S, dS_dl, d2S_dl


def gimp_shape_and_grad(particle, node, positions, grid: BackgroundGrid, lengths):
    """Product-form weight ``S`` and its spatial gradient for one pair."""
    xp = np.asarray(positions, dtype=float)[particle]
    lp = np.asarray(lengths, dtype=float)[particle]
    Xv = grid.node_coords[node]
    Sx, dSx = gimp_1d(xp[0] - Xv[0], grid.h, lp[0])
    Sy, dSy = gimp_1d(xp[1] - Xv[1], grid.h, lp[1])
    return float(Sx * Sy), np.array([dSx * Sy, Sx * dSy])


def _check_inside(x, grid):
    lo, hi = grid.origin, grid.upper
    out = np.any((x < lo) | (x > hi), axis=1)
    if np.any(out):
        p = int(np.flatnonzero(out)[0])
        raise GridEscapeError(p, x[p])


def influence_nodes(particle, grid: BackgroundGrid, positions, lengths) -> np.ndarray:
    """Sorted node indices with nonzero GIMP support for one particle."""
    xp = np.asarray(positions, dtype=float)[particle][None]
    lp = np.asarray(lengths, dtype=float)[particle][None]
    _check_inside(xp, grid)
    conn = build_connectivity(xp, lp, grid)
    nodes = conn.nodes[0]
    return np.sort(nodes[nodes >= 0])


@dataclass
class Connectivity:
    """Particle-to-node coupling frozen for one load step.

    Slot ``s = a + b * width`` of particle ``p`` refers to node
    ``(base[p, 0] + a, base[p, 1] + b)``; ``nodes`` is -1 where that node lies
    outside the grid or outside the particle's support.
    """

    width: int
    base: np.ndarray
    nodes: np.ndarray
    S: np.ndarray
    G: np.ndarray
    dG_dx: np.ndarray = None
    dS_dl: np.ndarray = None
    dG_dl: np.ndarray = None
    _touched: np.ndarray = field(default=None, repr=False)

    @property
    def n_particles(self):
        return self.nodes.shape[0]

    def touched_nodes(self) -> np.ndarray:
        if self._touched is None:
            n = self.nodes[self.nodes >= 0]
            self._touched = np.unique(n)
        return self._touched

    def gather(self, nodal):
        """``nodal[nodes]`` with zeros in invalid slots; ``nodal`` is (n_nodes, k)."""
        idx = np.where(self.nodes >= 0, self.nodes, 0)
        out = nodal[idx]
        out[self.nodes < 0] = 0.0
        return out

    def scatter(self, slot_values, n_nodes):
        """Sum per-slot vectors ``(P, M, k)`` onto nodes; returns (n_nodes, k)."""
        k = slot_values.shape[-1]
        valid = self.nodes >= 0
        idx = self.nodes[valid]
        vals = slot_values[valid]
        out = np.empty((n_nodes, k))
        for c in range(k):
            out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n_nodes)
        return out


def build_connectivity(x, l, grid: BackgroundGrid, second_order=False) -> Connectivity:
    x = np.asarray(x, dtype=float)
    l = np.asarray(l, dtype=float)
    _check_inside(x, grid)
    h = grid.h
    rel = (x - grid.origin) / h
    reach = 1.0 + 0.5 * l / h
    lo = np.floor(rel - reach).astype(np.int64) + 1
    hi = np.ceil(rel + reach).astype(np.int64) - 1
    width = int(max(1, (hi - lo + 1).max())) if len(x) else 1
    offs = np.arange(width)
    nx1, ny1 = grid.nodes_per_axis
    ix = lo[:, 0, None] + offs          # (P, W)
    iy = lo[:, 1, None] + offs
    dx = x[:, 0, None] - (grid.origin[0] + ix * h)
    dy = x[:, 1, None] - (grid.origin[1] + iy * h)
    lx, ly = l[:, 0, None], l[:, 1, None]
    # nodes grazing the support edge carry rounding-level weight only; drop
    # them so no dof ends up with an all-but-zero stiffness row
    edge = SUPPORT_TOL * h
    vx = ((ix <= hi[:, 0, None]) & (ix >= 0) & (ix < nx1)
          & (np.abs(dx) < h + 0.5 * lx - edge))
    vy = ((iy <= hi[:, 1, None]) & (iy >= 0) & (iy < ny1)
          & (np.abs(dy) < h + 0.5 * ly - edge))
    if second_order:
        Sx, dSx, d2Sx, Sx_l, dSx_l = gimp_1d(dx, h, lx, True)
        Sy, dSy, d2Sy, Sy_l, dSy_l = gimp_1d(dy, h, ly, True)
    else:
        Sx, dSx = gimp_1d(dx, h, lx)
        Sy, dSy = gimp_1d(dy, h, ly)
    for arr in ((Sx, dSx) + ((d2Sx, Sx_l, dSx_l) if second_order else ())):
        arr[~vx] = 0.0
    for arr in ((Sy, dSy) + ((d2Sy, Sy_l, dSy_l) if second_order else ())):
        arr[~vy] = 0.0
    P = len(x)
    M = width * width

    def outer(ax, ay):
        # slot b * W + a  <->  (y offset b, x offset a)
        return (ay[:, :, None] * ax[:, None, :]).reshape(P, M)

    S = outer(Sx, Sy)
    G = np.stack([outer(dSx, Sy), outer(Sx, dSy)], axis=-1)
    valid = (vy[:, :, None] & vx[:, None, :]).reshape(P, M)
    nodes = (ix[:, None, :] + iy[:, :, None] * nx1).reshape(P, M)
    nodes = np.where(valid, nodes, -1)
    conn = Connectivity(width=width, base=lo, nodes=nodes, S=S, G=G)
    if second_order:
        dG = np.empty((P, M, 2, 2))
        dG[..., 0, 0] = outer(d2Sx, Sy)
        dG[..., 0, 1] = outer(dSx, dSy)
        dG[..., 1, 0] = dG[..., 0, 1]
        dG[..., 1, 1] = outer(Sx, d2Sy)
        conn.dG_dx = dG
        conn.dS_dl = np.stack([outer(Sx_l, Sy), outer(Sx, Sy_l)], axis=-1)
        dGl = np.empty((P, M, 2, 2))      # [.., i, j] = dG_i / dl_j
        dGl[..., 0, 0] = outer(dSx_l, Sy)
        dGl[..., 0, 1] = outer(dSx, Sy_l)
        dGl[..., 1, 0] = outer(Sx_l, dSy)
        dGl[..., 1, 1] = outer(Sx, dSy_l)
        conn.dG_dl = dGl
    return conn


def _node_weights(points, grid, conn, stiffness=None):
    """Support ``sum_p S_vp V0_p`` of each node less its largest single term.

    A node held by one particle alone is nearly a mechanism: that
    particle's four deformation-gradient entries cannot pin all the nodes
    that only it reaches (the stub particle at an acute corner), so such
    nodes count as weak however large their one weight is.
    """
    vol = points.V0 if stiffness is None else points.V0 * stiffness
    c = conn.S * vol[:, None]
    w = conn.scatter(c[..., None], grid.n_nodes)[:, 0]
    valid = conn.nodes >= 0
    top = np.zeros(grid.n_nodes)
    np.maximum.at(top, conn.nodes[valid], c[valid])
    return w - top


def active_dofs(points: MaterialPointSet, grid: BackgroundGrid, conn: Connectivity = None,
                min_weight: float = 0.0):
    """Sorted free dofs: supported nodes minus Dirichlet-constrained axes.

    With ``min_weight > 0`` a node also needs a particle weight
    ``sum_p S_vp V0_p``, less its largest single term, of at least
    ``min_weight`` cell volumes; nodes that only graze a particle's support
    or hang off a single particle would otherwise make the tangent
    numerically singular.
    """
    if len(points) == 0:
        raise ConfigError("points", "no material points: active dof set is empty")
    if conn is None:
        conn = build_connectivity(points.x, points.l, grid)
    nodes = conn.touched_nodes()
    if min_weight > 0:
        w = _node_weights(points, grid, conn)
        nodes = nodes[w[nodes] >= min_weight * grid.h ** 2 * points.thickness]
    dofs = np.concatenate([2 * nodes, 2 * nodes + 1])
    fixed = grid.dirichlet.reshape(-1)[dofs]
    dofs = np.sort(dofs[~fixed])
    if dofs.size == 0:
        raise ConfigError("boundary", "every supported dof is constrained")
    return dofs


@dataclass
class DofLayout:
    """Unknowns of a step.

    ``free`` are the independent dofs. A supported node whose particle
    weight falls below the threshold does not get unknowns of its own; its
    dofs follow those of the nearest well-supported node (``slaves`` copy
    ``masters``), which keeps rigid motions exact where pinning the node
    would lock the particles around it.
    """

    free: np.ndarray
    slaves: np.ndarray
    masters: np.ndarray


def reference_node_weights(points: MaterialPointSet, grid: BackgroundGrid) -> np.ndarray:
    """Node weights of the undeformed configuration, NaN where no particle reaches."""
    conn = build_connectivity(points.X0, points.l0, grid)
    w = np.full(grid.n_nodes, np.nan)
    nodes = conn.touched_nodes()
    w[nodes] = _node_weights(points, grid, conn)[nodes]
    return w


def dof_layout(points: MaterialPointSet, grid: BackgroundGrid, conn: Connectivity = None,
               min_weight: float = 0.0, stiffness=None, reference=None) -> DofLayout:
    """Split the supported dofs into independent unknowns and followers.

    A node's weight is the particle volume it carries beyond its strongest
    particle, optionally scaled by ``stiffness`` (per particle, relative to the stiffest one) so that nodes
    held only by near-void material count as weak. ``reference`` holds fixed
    per-node weights (see ``reference_node_weights``) used instead of the
    current ones; a node no particle reached there always follows, so the
    split no longer moves with the particles.
    """
    if len(points) == 0:
        raise ConfigError("points", "no material points: active dof set is empty")
    if conn is None:
        conn = build_connectivity(points.x, points.l, grid)
    nodes = conn.touched_nodes()
    weak = np.zeros(0, dtype=np.int64)
    if min_weight > 0:
        w = _node_weights(points, grid, conn, stiffness)
        if reference is not None:
            w = np.where(np.isfinite(reference), reference, 0.0)
        strong = w[nodes] >= min_weight * grid.h ** 2 * points.thickness
        weak, nodes = nodes[~strong], nodes[strong]
    if nodes.size == 0:
        raise ConfigError("points", "no grid node carries enough particle weight")
    dir_flat = grid.dirichlet.reshape(-1)
    dofs = np.concatenate([2 * nodes, 2 * nodes + 1])
    free = np.sort(dofs[~dir_flat[dofs]])
    if free.size == 0:
        raise ConfigError("boundary", "every supported dof is constrained")
    if weak.size:
        # integer lattice distances, so ties are exact wherever the grid sits;
        # argmin then takes the lowest node index among equidistant candidates
        nx1 = grid.nodes_per_axis[0]
        ij = np.stack([np.arange(grid.n_nodes) % nx1, np.arange(grid.n_nodes) // nx1], axis=1)
        d2 = np.sum((ij[weak][:, None, :] - ij[nodes][None, :, :]) ** 2, axis=2)
        master = nodes[np.argmin(d2, axis=1)]
        slaves = np.concatenate([2 * weak, 2 * weak + 1])
        masters = np.concatenate([2 * master, 2 * master + 1])
        own = ~dir_flat[slaves]
        slaves, masters = slaves[own], masters[own]
    else:
        slaves = masters = np.zeros(0, dtype=np.int64)
    return DofLayout(free, slaves, masters)
