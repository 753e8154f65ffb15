"""Weyl-geometric kernels: connection, scalar curvature, length transport.

A Weyl structure pairs the metric with a one-form phi_k (units 1/length) that
drives the change of vector lengths under transport, dl = l phi_k dx^k.  When
phi is built from an ensemble density the geometry is integrable and its scalar
curvature reproduces the quantum potential up to the coupling gamma(n).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NodeProximityError, UnsupportedDimensionError
from .grids import (
    COVARIANT,
    NODE_FLOOR,
    Grid,
    Metric,
    ScalarField,
    VectorField,
    cells_of,
    dilate_mask,
    gradient,
    integrate,
    interior_mask,
    interpolate_vector,
    laplace_beltrami,
    raise_index,
    weighted_divergence,
)

logger = logging.getLogger(__name__)


def curvature_coupling(n: int) -> float:
    """Dimension-dependent coupling gamma(n) = (n-2) / (8 (n-1))."""
    if n < 2:
        raise UnsupportedDimensionError("curvature coupling requires n >= 2")
    return 0.125 * (n - 2) / (n - 1)


@dataclass(frozen=True)
class WeylStructure:
    """Metric plus Weyl one-form, the full metrical data of the geometry."""

    metric: Metric
    phi: VectorField

    def __post_init__(self):
        if self.phi.variance != COVARIANT:
            raise ValueError("the Weyl one-form must be covariant")
        if self.phi.ndim != self.metric.n:
            raise ValueError("one-form components do not match metric dimension")


@dataclass(frozen=True)
class ConnectionCoefficients:
    """Connection Gamma^k_ij per grid point, shape (n, n, n) + grid.shape."""

    grid: Grid
    gamma: np.ndarray

    def max_asymmetry(self) -> float:
        return float(np.abs(self.gamma - np.swapaxes(self.gamma, 1, 2)).max())


def connection(W: WeylStructure) -> ConnectionCoefficients:
    """Connection coefficients of a constant-diagonal metric with one-form phi.

    The Christoffel part vanishes; what is left is
    Gamma^k_ij = (g_ki phi_j + g_kj phi_i - g_ij phi^k) / 2.
    """
    g = W.metric
    n = g.n
    grid = W.phi.grid
    phi = W.phi.components
    gamma = np.zeros((n, n, n) + grid.shape)
    for k in range(n):
        for i in range(n):
            for j in range(n):
                term = 0.0
                if k == i:
                    term = term + phi[j]
                if k == j:
                    term = term + phi[i]
                if i == j:
                    term = term - (g.diag[i] / g.diag[k]) * phi[k]
                gamma[k, i, j] = 0.5 * term
    return ConnectionCoefficients(grid, gamma)


def metric_transport_rate(W: WeylStructure) -> np.ndarray:
    """Rate of change of g_ij along transport, shape (k, i, j) + grid.shape.

    For the connection above this equals g_ij phi_k, the statement that lengths
    are not preserved: the covariant constancy of the metric fails by exactly
    the one-form term.
    """
    g = W.metric
    n = g.n
    conn = connection(W).gamma
    rate = np.zeros_like(conn)
    for k in range(n):
        for i in range(n):
            for j in range(n):
                # constant diagonal metric: only two contractions survive
                rate[k, i, j] = conn[j, k, i] * g.diag[j] + conn[i, k, j] * g.diag[i]
    return rate


def scalar_curvature(W: WeylStructure, r_riem: float = 0.0) -> ScalarField:
    """Scalar curvature of the Weyl structure on a flat background.

    R = R_riem + (n-1)(n-2) phi_k phi^k - 2 (n-1) div(phi^k).  The Riemannian
    part is carried as an explicit constant so the flatness assumption stays
    visible and replaceable.
    """
    g = W.metric
    n = g.n
    if n < 2:
        raise ValueError("scalar curvature requires n >= 2")
    phi = W.phi
    phi_up = raise_index(phi, g)
    quad = np.zeros(phi.grid.shape)
    for c_lo, c_up in zip(phi.components, phi_up.components):
        quad += c_lo * c_up
    div = weighted_divergence(phi_up, g)
    values = r_riem + (n - 1) * (n - 2) * quad - 2 * (n - 1) * div.values
    mask = dilate_mask(phi.mask, phi.grid)
    if div.mask is not None:
        mask = div.mask if mask is None else (mask | div.mask)
    return ScalarField(phi.grid, values, name="weyl_curvature", mask=mask)


def _node_mask(mu: ScalarField, floor: float) -> np.ndarray | None:
    vals = mu.values
    top = vals.max()
    if top <= 0:
        raise ValueError("density must be positive somewhere")
    mask = vals < floor * top
    if mu.mask is not None:
        mask |= mu.mask
    return mask if mask.any() else None


def phi_from_density(mu: ScalarField, g: Metric, floor: float = NODE_FLOOR) -> VectorField:
    """Variational solution for the one-form, phi_i = -d_i(ln mu) / (n-2).

    Discretised as -grad(mu)/((n-2) mu), which is the exact minimiser of the
    discrete curvature functional and stays accurate down to polynomial nodes.
    Masked wherever mu falls below the node floor.
    """
    n = g.n
    if n <= 2:
        raise UnsupportedDimensionError("phi_from_density requires n >= 3")
    if mu.grid.ndim != n:
        raise ValueError("density grid dimension does not match metric")
    if np.all(mu.values <= 0):
        raise ValueError("density must be positive somewhere")
    mask = _node_mask(mu, floor)
    grad = gradient(mu)
    safe = np.where(mu.values > 0, mu.values, 1.0)
    comps = tuple(-c / ((n - 2) * safe) for c in grad.components)
    out_mask = dilate_mask(mask, mu.grid) if mask is not None else None
    if grad.mask is not None:
        out_mask = grad.mask if out_mask is None else (out_mask | grad.mask)
    return VectorField(mu.grid, comps, variance=COVARIANT, name="weyl_form", mask=out_mask)


def curvature_from_density(
    mu: ScalarField, g: Metric, gamma: float | None = None, floor: float = NODE_FLOOR
) -> ScalarField:
    """Curvature obtained after substituting the density solution for phi.

    R = laplace_beltrami(sqrt(mu)) / (2 gamma sqrt(mu)), masked below the node
    floor.  With gamma at its default this equals the quantum potential up to
    the factor -gamma lambda^2.
    """
    n = g.n
    if gamma is None:
        gamma = curvature_coupling(n)
    if gamma == 0:
        raise ValueError("gamma must be nonzero")
    mask = _node_mask(mu, floor)
    root = ScalarField(mu.grid, np.sqrt(np.clip(mu.values, 0.0, None)), mask=mask)
    lap = laplace_beltrami(root, g)
    safe = np.where(root.values > 0, root.values, 1.0)
    values = lap.values / (2.0 * gamma * safe)
    return ScalarField(mu.grid, values, name="curvature_from_density", mask=lap.mask)


def transport_length(W: WeylStructure, path: np.ndarray, l0: float) -> float:
    """Transport a length along a polyline: returns l0 exp(integral phi_k dx^k).

    Trapezoid quadrature on the polyline vertices; raises NodeProximityError if
    any vertex sits in a masked cell.
    """
    if l0 <= 0:
        raise ValueError("l0 must be positive")
    pts = np.atleast_2d(np.asarray(path, dtype=float))
    if pts.shape[0] < 2:
        raise ValueError("path needs at least two vertices")
    phi = W.phi
    if phi.mask is not None:
        cells = cells_of(phi.grid, pts)
        if phi.mask[cells].any():
            raise NodeProximityError("transport path touches a masked node cell")
    vals = interpolate_vector(phi, pts)
    seg = np.diff(pts, axis=0)
    mid = 0.5 * (vals[:-1] + vals[1:])
    return float(l0 * np.exp(np.sum(mid * seg)))


def weyl_action_functional(mu: ScalarField, phi: VectorField, g: Metric) -> float:
    """Curvature part of the action after partial integration.

    I = (n-1) sum_cells [ mu sqrt(g) (n-2) phi_i phi^i + sqrt(g) phi^i 2 d_i mu ] dV.
    Quadratic in phi with a positive-definite quadratic part, so the density
    solution is its unique minimum.
    """
    n = g.n
    if not np.isfinite(integrate(mu, g)):
        raise ValueError("density is not normalizable on this grid")
    phi_up = raise_index(phi, g)
    grad_mu = gradient(mu)
    quad = np.zeros(mu.grid.shape)
    lin = np.zeros(mu.grid.shape)
    for c_lo, c_up, dmu in zip(phi.components, phi_up.components, grad_mu.components):
        quad += c_lo * c_up
        lin += c_up * dmu
    integrand = mu.values * (n - 2) * quad + 2.0 * lin
    valid = phi.valid & mu.valid
    total = integrand[valid].sum() * g.sqrt_g * mu.grid.cell_volume
    return float((n - 1) * total)


def integrability_check(phi: VectorField) -> float:
    """Largest interior antisymmetry |d_i phi_j - d_j phi_i| (zero iff a gradient)."""
    grid = phi.grid
    n = phi.ndim
    interior = interior_mask(grid)
    if phi.mask is not None:
        interior = interior & ~dilate_mask(phi.mask, grid)
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            di_pj = _partial(phi, j, i)
            dj_pi = _partial(phi, i, j)
            resid = np.abs(di_pj - dj_pi)[interior]
            if resid.size:
                worst = max(worst, float(resid.max()))
    return worst


def _partial(phi: VectorField, comp: int, axis: int) -> np.ndarray:
    from .grids import _diff1  # local alias; shares the stencil definitions

    grid = phi.grid
    return _diff1(phi.components[comp], grid.spacings[axis], axis, grid.periodic[axis])
