"""Node detection, loop circulation, winding numbers, and phase decomposition.

Nodes are connected regions where the density falls below a floor; loops that
cannot be contracted without crossing a codimension-2 node may carry nonzero
circulation, quantized in units of h.  A momentum field splits into the
gradient of a global single-valued function U (zero circulation around every
loop) plus a circle-valued remainder W represented only through its gradient
and integer windings, never through values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg

from .errors import NodeProximityError, NonQuantizedCirculationError, NumericalError
from .grids import (
    COVARIANT,
    Grid,
    Metric,
    ScalarField,
    VectorField,
    VectorInterpolator,
    cells_of,
    gradient,
)


@dataclass(frozen=True)
class NodeRegion:
    """One connected sub-floor region with its fitted local geometry."""

    index: int
    centroid: np.ndarray
    codimension: int
    n_cells: int
    direction: np.ndarray | None = None
    order: float | None = None
    radius: float = 0.0


@dataclass(frozen=True)
class NodeSet:
    regions: tuple
    mask: np.ndarray
    floor: float
    grid: Grid

    def line_like(self) -> tuple:
        """Regions around which a planar winding is defined (codimension 2)."""
        return tuple(r for r in self.regions if r.codimension == 2)


def detect_nodes(mu: ScalarField, floor: float,
                 fit_radius: float | None = None) -> NodeSet:
    """Label connected regions with mu below floor * max(mu) and fit their order.

    The order m of each region comes from a least-squares fit of ln(mu) against
    ln(r) over unmasked cells within `fit_radius` of the region (default a
    quarter of the smallest half-extent), weighted to be uniform per log bin.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    grid = mu.grid
    top = mu.values.max()
    mask = (mu.values < floor * top) | ~mu.valid
    if mask.all():
        raise ValueError("the whole grid is below the node floor")
    if not mask.any():
        return NodeSet((), mask, floor, grid)
    labels, n_regions = ndimage.label(mask)
    mesh = grid.meshgrid()
    extents = np.array([hi - lo for lo, hi in zip(grid.mins, grid.maxs)])
    h_max = max(grid.spacings)
    regions = []
    for idx in range(1, n_regions + 1):
        sel = labels == idx
        pts = np.stack([m[sel] for m in mesh], axis=1)
        centroid = pts.mean(axis=0)
        rel = pts - centroid
        spans = np.zeros(grid.ndim)
        direction = None
        if pts.shape[0] > 1:
            cov = rel.T @ rel / pts.shape[0]
            evals, evecs = np.linalg.eigh(cov)
            proj = rel @ evecs
            spans = proj.max(axis=0) - proj.min(axis=0)
            direction = evecs[:, -1]
        extended = int(np.sum(spans >= 0.5 * extents.min()))
        codim = grid.ndim - extended
        line_dir = direction if codim == 2 else None
        if fit_radius is not None:
            r_hi = fit_radius
        elif line_dir is not None:
            # fit window lives in the plane transverse to the node line
            perp = [extents[a] for a in range(grid.ndim)
                    if abs(line_dir[a]) < 0.9]
            r_hi = 0.25 * min(perp) if perp else 0.25 * extents.min()
        else:
            r_hi = 0.25 * extents.min()
        radius = _region_radius(rel, line_dir)
        order = _fit_order(
            mu, mesh, centroid, line_dir,
            r_lo=max(radius + h_max, 2 * h_max),
            r_hi=r_hi,
            codim=codim,
        )
        regions.append(
            NodeRegion(
                index=idx, centroid=centroid, codimension=codim,
                n_cells=int(pts.shape[0]),
                direction=direction if codim == 2 else None,
                order=order, radius=radius,
            )
        )
    return NodeSet(tuple(regions), mask, floor, grid)


def _region_radius(rel: np.ndarray, direction: np.ndarray | None) -> float:
    if direction is None:
        return float(np.linalg.norm(rel, axis=1).max()) if rel.size else 0.0
    perp = rel - np.outer(rel @ direction, direction)
    return float(np.linalg.norm(perp, axis=1).max()) if perp.size else 0.0


def _fit_order(mu, mesh, centroid, direction, r_lo, r_hi, codim) -> float | None:
    if r_hi < 3 * r_lo:
        return None
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    rel = pts - centroid
    if direction is not None:
        rel = rel - np.outer(rel @ direction, direction)
    r = np.linalg.norm(rel, axis=1)
    vals = mu.values.ravel()
    ok = (r >= r_lo) & (r <= r_hi) & (vals > 0) & mu.valid.ravel()
    if ok.sum() < 16:
        return None
    r_sel, v_sel = r[ok], vals[ok]
    w = r_sel ** (1 - max(codim, 1))  # even sampling per logarithmic bin
    x = np.log(r_sel)
    y = np.log(v_sel)
    wx = w.sum()
    xb = (w * x).sum() / wx
    yb = (w * y).sum() / wx
    slope = (w * (x - xb) * (y - yb)).sum() / (w * (x - xb) ** 2).sum()
    return float(slope / 2.0)


# ---------------------------------------------------------------------------
# loops and circulation


@dataclass(frozen=True)
class Loop:
    """Closed polyline of interpolation points (first vertex repeated last)."""

    points: np.ndarray
    enclosed: tuple = field(default=())

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 4:
            raise ValueError("a loop needs at least three distinct vertices")
        if not np.allclose(pts[0], pts[-1], atol=1e-12):
            raise ValueError("loop is not closed (first vertex must repeat last)")
        object.__setattr__(self, "points", pts)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def circle_loop(center, radius, n_points=256, normal_axis=2, tilt=0.0,
                phase=0.0) -> Loop:
    """Planar circle (optionally tilted out of plane) around `center`."""
    center = np.asarray(center, dtype=float)
    n = center.size
    t = np.linspace(0.0, 2 * np.pi, n_points + 1) + phase
    pts = np.tile(center, (n_points + 1, 1))
    axes = [a for a in range(n) if a != normal_axis]
    pts[:, axes[0]] += radius * np.cos(t)
    pts[:, axes[1]] += radius * np.sin(t)
    if tilt:
        pts[:, normal_axis] += tilt * np.sin(t)
    pts[-1] = pts[0]
    return Loop(pts)


def loop_circulation(p: VectorField, loop: Loop) -> float:
    """Trapezoid quadrature of the line integral of a covariant field around a loop."""
    if p.variance != COVARIANT:
        raise ValueError("loop circulation needs a covariant field")
    pts = loop.points
    if p.mask is not None and p.mask.any():
        cells = cells_of(p.grid, pts)
        if p.mask[cells].any():
            raise NodeProximityError("loop vertex inside a masked node cell")
    vals = VectorInterpolator(p).at(pts)
    seg = np.diff(pts, axis=0)
    mid = 0.5 * (vals[:-1] + vals[1:])
    return float(np.sum(mid * seg))


def winding_number(circulation: float, h: float) -> tuple:
    """Nearest integer winding z = round(circulation / h) and its defect.

    A defect above 0.2 signals either a broken discretisation or a field whose
    circulation is genuinely not quantized, and is a hard error.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    ratio = circulation / h
    z = int(np.rint(ratio))
    defect = float(abs(ratio - z))
    if defect > 0.2:
        raise NonQuantizedCirculationError(
            f"circulation/h = {ratio:.4f} sits {defect:.3f} from the nearest integer"
        )
    return z, defect


def enclosed_nodes(loop: Loop, nodes: NodeSet) -> tuple:
    """Indices of line-like node regions the loop winds around (planar sense)."""
    out = []
    for region in nodes.line_like():
        e = region.direction
        rel = loop.points - region.centroid
        perp = rel - np.outer(rel @ e, e)
        basis = _perp_basis(e)
        uv = perp @ basis
        ang = np.unwrap(np.arctan2(uv[:, 1], uv[:, 0]))
        turns = (ang[-1] - ang[0]) / (2 * np.pi)
        if abs(turns) > 0.5:
            out.append(region.index)
    return tuple(out)


def _perp_basis(e: np.ndarray) -> np.ndarray:
    seed = np.zeros_like(e)
    seed[int(np.argmin(np.abs(e)))] = 1.0
    u = seed - (seed @ e) * e
    u /= np.linalg.norm(u)
    v = np.cross(e, u) if e.size == 3 else None
    if v is None:
        raise ValueError("planar winding requires three dimensions")
    return np.stack([u, v], axis=1)


def vortex_gradient_field(grid: Grid, point, direction, mask=None) -> VectorField:
    """Unit-winding azimuthal gradient around a line: the model for one quantum.

    Components of grad(theta) where theta is the azimuth around the line
    through `point` along `direction`; circulation around the line is 2 pi.
    """
    point = np.asarray(point, dtype=float)
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    mesh = grid.meshgrid()
    rel = [m - c for m, c in zip(mesh, point)]
    along = sum(r * ec for r, ec in zip(rel, e))
    perp = [r - along * ec for r, ec in zip(rel, e)]
    rho2 = sum(c * c for c in perp)
    floor = (0.5 * min(grid.spacings)) ** 2
    safe = np.where(rho2 > floor, rho2, np.inf)
    # grad(theta) = (e x r_perp) / |r_perp|^2
    cross = [
        e[1] * perp[2] - e[2] * perp[1],
        e[2] * perp[0] - e[0] * perp[2],
        e[0] * perp[1] - e[1] * perp[0],
    ]
    comps = tuple(c / safe for c in cross)
    return VectorField(grid, comps, variance=COVARIANT, name="vortex", mask=mask)


# ---------------------------------------------------------------------------
# momentum decomposition


@dataclass(frozen=True)
class PhaseDecomposition:
    """Single-valued part U plus quantized windings for the circle-valued part.

    The circle-valued function itself is never materialised; only its gradient
    model and the integer windings appear.
    """

    u: ScalarField
    windings: dict
    defects: dict
    h: float
    residual: float
    node_orders: dict

    @property
    def max_defect(self) -> float:
        return max(self.defects.values(), default=0.0)

    def summary(self, nodes: NodeSet) -> dict:
        entries = []
        for region in nodes.regions:
            entries.append(
                {
                    "centroid": [float(c) for c in region.centroid],
                    "codimension": region.codimension,
                    "m": None if region.order is None else float(region.order),
                    "z": self.windings.get(region.index),
                }
            )
        return {
            "h": self.h,
            "nodes": entries,
            "max_defect": self.max_defect,
            "residual": self.residual,
        }


def _connected_domain(p: VectorField, nodes: NodeSet) -> np.ndarray:
    domain = ~nodes.mask
    if p.mask is not None:
        domain &= ~p.mask
    _, count = ndimage.label(domain)
    if count != 1:
        raise ValueError("domain minus nodes is not connected")
    return domain


def _poisson_projection(p: VectorField, domain: np.ndarray, g: Metric,
                        rtol: float = 1e-8) -> np.ndarray:
    """Least-squares projection of p onto discrete gradients over the domain.

    Minimises the metric-weighted misfit between face differences of U and the
    face-averaged covariant components of p; the stationarity condition is the
    weighted Poisson problem with natural (flux-matching) boundary conditions.
    """
    grid = p.grid
    n_cells = int(domain.sum())
    ids = -np.ones(grid.shape, dtype=np.int64)
    ids[domain] = np.arange(n_cells)
    rows, cols, data = [], [], []
    b = np.zeros(n_cells)
    diag_acc = np.zeros(n_cells)
    for a in range(grid.ndim):
        h = grid.spacings[a]
        w = g.sqrt_g * (1.0 / g.diag[a]) * grid.cell_volume
        nb_domain = np.roll(domain, -1, axis=a)
        nb_ids = np.roll(ids, -1, axis=a)
        pair = domain & nb_domain
        if not grid.periodic[a]:
            sl = [slice(None)] * grid.ndim
            sl[a] = slice(-1, None)
            pair[tuple(sl)] = False
        if not pair.any():
            continue
        left = ids[pair]
        right = nb_ids[pair]
        p_face = 0.5 * (p.components[a][pair] + np.roll(p.components[a], -1, axis=a)[pair])
        coef = w / h**2
        rows += [left, right]
        cols += [right, left]
        data += [np.full(left.size, -coef), np.full(left.size, -coef)]
        np.add.at(diag_acc, left, coef)
        np.add.at(diag_acc, right, coef)
        flux = (w / h) * p_face
        np.add.at(b, left, -flux)
        np.add.at(b, right, flux)
    rows.append(np.arange(n_cells))
    cols.append(np.arange(n_cells))
    data.append(diag_acc)
    A = sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_cells, n_cells),
    )
    b -= b.mean()  # project out the constant null space
    inv_diag = 1.0 / np.maximum(diag_acc, 1e-300)
    M = sparse.diags(inv_diag)
    u, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=20000, M=M)
    if info != 0:
        raise NumericalError(f"Poisson projection did not converge (info={info})")
    u -= u.mean()  # pin the free additive constant
    out = np.zeros(grid.shape)
    out[domain] = u
    return out


def _winding_loop(q: VectorField, region: NodeRegion, domain: np.ndarray,
                  grid: Grid) -> Loop:
    """A circle around a line-like node staying well inside the live domain."""
    e = region.direction
    mesh = grid.meshgrid()
    rel = [m - c for m, c in zip(mesh, region.centroid)]
    along = sum(r * ec for r, ec in zip(rel, e))
    perp2 = sum((r - along * ec) ** 2 for r, ec in zip(rel, e))
    live = domain if q.mask is None else (domain & ~q.mask)
    dists = np.sqrt(perp2[live])
    if dists.size == 0:
        raise NodeProximityError("no live cells around the node region")
    normal_axis = int(np.argmax(np.abs(e)))
    for quantile in (0.25, 0.35, 0.5, 0.65, 0.15):
        radius = float(np.quantile(dists, quantile))
        if radius <= region.radius + max(grid.spacings):
            continue
        loop = circle_loop(region.centroid, radius, n_points=256,
                           normal_axis=normal_axis)
        cells = cells_of(grid, loop.points)
        if live[cells].all() and grid.contains(loop.points).all():
            return loop
    raise NodeProximityError("could not place a winding loop around the node")


def decompose_momentum(p: VectorField, g: Metric, nodes: NodeSet,
                       h: float) -> PhaseDecomposition:
    """Split a covariant momentum field into grad(U) plus quantized vortices.

    U solves the metric-weighted Poisson problem with natural boundary
    conditions (iterative solve, relative residual < 1e-8); windings come from
    loop circulations of p - grad(U) around each line-like node; the residual
    is the largest metric norm of p - grad(U) - grad(W model), where the model
    superposes one ideal vortex of strength z h / (2 pi) per node.
    """
    if p.variance != COVARIANT:
        raise ValueError("momentum decomposition needs a covariant field")
    grid = p.grid
    domain = _connected_domain(p, nodes)
    u_vals = _poisson_projection(p, domain, g)
    u_field = ScalarField(grid, u_vals, name="U", mask=~domain)
    grad_u = gradient(u_field)
    q = VectorField(
        grid,
        tuple(pc - gc for pc, gc in zip(p.components, grad_u.components)),
        variance=COVARIANT,
        mask=grad_u.mask,
    )
    windings, defects = {}, {}
    model = None
    for region in nodes.line_like():
        loop = _winding_loop(q, region, domain, grid)
        circ = loop_circulation(q, loop)
        z, defect = winding_number(circ, h)
        windings[region.index] = z
        defects[region.index] = defect
        if z != 0:
            vort = vortex_gradient_field(grid, region.centroid, region.direction)
            scaled = tuple(z * h / (2 * np.pi) * c for c in vort.components)
            if model is None:
                model = list(scaled)
            else:
                model = [m + s for m, s in zip(model, scaled)]
    if model is None:
        model = [np.zeros(grid.shape) for _ in range(grid.ndim)]
    live = q.valid & domain
    resid_sq = np.zeros(grid.shape)
    for a in range(grid.ndim):
        diff = p.components[a] - grad_u.components[a] - model[a]
        resid_sq += diff * diff / g.diag[a]
    residual = float(np.sqrt(resid_sq[live].max())) if live.any() else 0.0
    orders = {r.index: r.order for r in nodes.regions}
    return PhaseDecomposition(
        u=u_field, windings=windings, defects=defects, h=h,
        residual=residual, node_orders=orders,
    )
