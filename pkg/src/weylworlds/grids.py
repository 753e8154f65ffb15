"""Rectilinear grids, the diagonal mass metric, and metric-aware difference operators.

All fields live on tensor-product grids with a constant diagonal metric, so the
volume weight sqrt(g) is a single positive number.  Derivatives use central
stencils (6th order in the deep interior, dropping to 4th and 2nd order within
three cells of a non-periodic boundary, one-sided at the boundary itself;
periodic axes wrap at full order).  Every operator here is a pure function of
immutable inputs and is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

COVARIANT = "covariant"
CONTRAVARIANT = "contravariant"

#: Relative density floor below which geometric quantities are undefined.
NODE_FLOOR = 1e-12

#: Stencil half-width of the highest-order interior difference.
STENCIL_RADIUS = 3


def _as_tuple(value, n: int, kind=float) -> tuple:
    if np.isscalar(value):
        return tuple(kind(value) for _ in range(n))
    out = tuple(kind(v) for v in value)
    if len(out) != n:
        raise ValueError(f"expected {n} per-axis entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid over an n-dimensional box.

    Non-periodic axes include both endpoints; periodic axes drop the right
    endpoint so the spacing tiles the interval exactly.
    """

    mins: tuple
    maxs: tuple
    counts: tuple
    periodic: tuple

    def __post_init__(self):
        if not (len(self.mins) == len(self.maxs) == len(self.counts) == len(self.periodic)):
            raise ValueError("per-axis tuples must have equal length")
        for lo, hi, n in zip(self.mins, self.maxs, self.counts):
            if hi <= lo:
                raise ValueError("axis max must exceed min")
            if n < 8:
                raise ValueError("grids need at least 8 points per axis")

    @classmethod
    def regular(cls, mins, maxs, counts, periodic=False, ndim: int | None = None) -> "Grid":
        """Build a grid from scalars or per-axis sequences."""
        if ndim is None:
            ndim = max(
                len(v) if not np.isscalar(v) else 1 for v in (mins, maxs, counts, periodic)
            )
        return cls(
            _as_tuple(mins, ndim),
            _as_tuple(maxs, ndim),
            _as_tuple(counts, ndim, int),
            _as_tuple(periodic, ndim, bool),
        )

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple:
        return tuple(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacings(self) -> tuple:
        out = []
        for lo, hi, n, per in zip(self.mins, self.maxs, self.counts, self.periodic):
            out.append((hi - lo) / (n if per else n - 1))
        return tuple(out)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def axis(self, i: int) -> np.ndarray:
        h = self.spacings[i]
        return self.mins[i] + h * np.arange(self.counts[i])

    def meshgrid(self) -> tuple:
        return tuple(np.meshgrid(*(self.axis(i) for i in range(self.ndim)), indexing="ij"))

    def index_coords(self, points: np.ndarray) -> np.ndarray:
        """Fractional index coordinates of physical points, shape (npts, ndim)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        mins = np.asarray(self.mins)
        h = np.asarray(self.spacings)
        return (pts - mins) / h

    def contains(self, points: np.ndarray, pad: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.ones(pts.shape[0], dtype=bool)
        for i, per in enumerate(self.periodic):
            if per:
                continue
            ok &= (pts[:, i] >= self.mins[i] - pad) & (pts[:, i] <= self.maxs[i] + pad)
        return ok


@dataclass(frozen=True)
class Metric:
    """Constant diagonal configuration-space metric (particle masses on the diagonal)."""

    diag: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=float)
        if d.ndim != 1 or d.size == 0:
            raise ValueError("metric diagonal must be a non-empty 1D array")
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise ValueError("metric diagonal entries must be positive and finite")
        object.__setattr__(self, "diag", d)

    @property
    def n(self) -> int:
        return self.diag.size

    @property
    def sqrt_g(self) -> float:
        return float(math.sqrt(np.prod(self.diag)))

    @property
    def inv_diag(self) -> np.ndarray:
        return 1.0 / self.diag


def build_mass_metric(masses: Sequence[float], space_dim: int) -> Metric:
    """Metric for N particles in `space_dim` dimensions: each mass repeated per coordinate."""
    m = np.asarray(masses, dtype=float)
    if m.size == 0:
        raise ValueError("masses must be non-empty")
    if np.any(m <= 0):
        raise ValueError("masses must be positive")
    if space_dim < 1:
        raise ValueError("space_dim must be >= 1")
    return Metric(np.repeat(m, space_dim))


@dataclass(frozen=True)
class ScalarField:
    """Grid-sampled scalar.  `mask` marks cells where the value is undefined."""

    grid: Grid
    values: np.ndarray
    name: str = ""
    mask: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != self.grid.shape:
                raise ValueError("mask shape does not match grid")
            object.__setattr__(self, "mask", m)
            v = np.where(m, 0.0, v)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"scalar field {self.name!r} contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.grid.shape, dtype=bool)
        return ~self.mask


@dataclass(frozen=True)
class VectorField:
    """Grid-sampled vector with an explicit index-variance flag."""

    grid: Grid
    components: tuple
    variance: str = COVARIANT
    name: str = ""
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.variance not in (COVARIANT, CONTRAVARIANT):
            raise ValueError(f"unknown variance {self.variance!r}")
        comps = []
        for c in self.components:
            a = np.asarray(c, dtype=float)
            if a.shape != self.grid.shape:
                raise ValueError("component shape does not match grid")
            comps.append(a)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != self.grid.shape:
                raise ValueError("mask shape does not match grid")
            object.__setattr__(self, "mask", m)
            comps = [np.where(m, 0.0, a) for a in comps]
        for a in comps:
            if not np.all(np.isfinite(a)):
                raise ValueError(f"vector field {self.name!r} contains non-finite values")
        object.__setattr__(self, "components", tuple(comps))

    @property
    def ndim(self) -> int:
        return len(self.components)

    @property
    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.grid.shape, dtype=bool)
        return ~self.mask


# ---------------------------------------------------------------------------
# finite differences


def _slices(ndim: int, axis: int, lo, hi) -> tuple:
    s = [slice(None)] * ndim
    s[axis] = slice(lo, hi)
    return tuple(s)


def _diff1(v: np.ndarray, h: float, axis: int, periodic: bool) -> np.ndarray:
    if periodic:
        r = lambda k: np.roll(v, -k, axis=axis)
        return (r(3) - 9 * r(2) + 45 * r(1) - 45 * r(-1) + 9 * r(-2) - r(-3)) / (60 * h)
    sl = lambda lo, hi: _slices(v.ndim, axis, lo, hi)
    out = np.gradient(v, h, axis=axis, edge_order=2)
    out[sl(2, -2)] = (
        -v[sl(4, None)] + 8 * v[sl(3, -1)] - 8 * v[sl(1, -3)] + v[sl(0, -4)]
    ) / (12 * h)
    out[sl(3, -3)] = (
        v[sl(6, None)]
        - 9 * v[sl(5, -1)]
        + 45 * v[sl(4, -2)]
        - 45 * v[sl(2, -4)]
        + 9 * v[sl(1, -5)]
        - v[sl(0, -6)]
    ) / (60 * h)
    return out


def _diff2(v: np.ndarray, h: float, axis: int, periodic: bool) -> np.ndarray:
    if periodic:
        r = lambda k: np.roll(v, -k, axis=axis)
        return (
            2 * r(3) - 27 * r(2) + 270 * r(1) - 490 * v + 270 * r(-1) - 27 * r(-2) + 2 * r(-3)
        ) / (180 * h * h)
    sl = lambda lo, hi: _slices(v.ndim, axis, lo, hi)
    out = np.empty_like(v)
    h2 = h * h
    out[sl(1, -1)] = (v[sl(2, None)] - 2 * v[sl(1, -1)] + v[sl(0, -2)]) / h2
    out[sl(2, -2)] = (
        -v[sl(4, None)] + 16 * v[sl(3, -1)] - 30 * v[sl(2, -2)] + 16 * v[sl(1, -3)] - v[sl(0, -4)]
    ) / (12 * h2)
    out[sl(3, -3)] = (
        2 * v[sl(6, None)]
        - 27 * v[sl(5, -1)]
        + 270 * v[sl(4, -2)]
        - 490 * v[sl(3, -3)]
        + 270 * v[sl(2, -4)]
        - 27 * v[sl(1, -5)]
        + 2 * v[sl(0, -6)]
    ) / (180 * h2)
    # one-sided boundary values, first-order accurate
    out[sl(0, 1)] = (v[sl(0, 1)] - 2 * v[sl(1, 2)] + v[sl(2, 3)]) / h2
    out[sl(-1, None)] = (v[sl(-1, None)] - 2 * v[sl(-2, -1)] + v[sl(-3, -2)]) / h2
    return out


def dilate_mask(mask: np.ndarray | None, grid: Grid, radius: int = STENCIL_RADIUS) -> np.ndarray | None:
    """Grow a mask by the stencil reach so derived fields stay conservative."""
    if mask is None or not mask.any():
        return None if mask is None else mask.copy()
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    out = mask
    for _ in range(radius):
        out = _binary_dilate_mixed(out, structure, grid)
    return out


def _binary_dilate_mixed(mask: np.ndarray, structure, grid: Grid) -> np.ndarray:
    # scipy's dilation has no per-axis wrap, so roll manually when any axis is periodic
    if not any(grid.periodic):
        return ndimage.binary_dilation(mask, structure=structure)
    out = mask.copy()
    for axis in range(mask.ndim):
        shifted_fwd = np.roll(mask, 1, axis=axis)
        shifted_back = np.roll(mask, -1, axis=axis)
        if not grid.periodic[axis]:
            sl0 = _slices(mask.ndim, axis, 0, 1)
            sl1 = _slices(mask.ndim, axis, -1, None)
            shifted_fwd[sl0] = False
            shifted_back[sl1] = False
        out |= shifted_fwd | shifted_back
    return out


def gradient(f: ScalarField) -> VectorField:
    """Covariant gradient of a scalar field (central differences, one-sided at edges)."""
    g = f.grid
    comps = [
        _diff1(f.values, g.spacings[a], a, g.periodic[a]) for a in range(g.ndim)
    ]
    return VectorField(
        g, tuple(comps), variance=COVARIANT, name=f"grad({f.name})" if f.name else "",
        mask=dilate_mask(f.mask, g),
    )


def weighted_divergence(X: VectorField, g: Metric) -> ScalarField:
    """Divergence (1/sqrt g) d_i(sqrt g X^i) of a contravariant field.

    With a constant diagonal metric the volume weight cancels, but the factors
    are kept explicit so the operator reads like its definition.
    """
    if X.variance != CONTRAVARIANT:
        raise ValueError("weighted_divergence expects a contravariant field")
    _check_metric(X.grid, g)
    grid = X.grid
    sq = g.sqrt_g
    acc = np.zeros(grid.shape)
    for a in range(grid.ndim):
        acc += _diff1(sq * X.components[a], grid.spacings[a], a, grid.periodic[a])
    return ScalarField(grid, acc / sq, name=f"div({X.name})" if X.name else "",
                       mask=dilate_mask(X.mask, grid))


def laplace_beltrami(f: ScalarField, g: Metric) -> ScalarField:
    """Metric Laplacian d_i(sqrt g g^ij d_j f)/sqrt g for a constant diagonal metric."""
    _check_metric(f.grid, g)
    grid = f.grid
    acc = np.zeros(grid.shape)
    for a in range(grid.ndim):
        acc += g.inv_diag[a] * _diff2(f.values, grid.spacings[a], a, grid.periodic[a])
    return ScalarField(grid, acc, name=f"lap({f.name})" if f.name else "",
                       mask=dilate_mask(f.mask, grid))


def raise_index(X: VectorField, g: Metric) -> VectorField:
    if X.variance != COVARIANT:
        raise ValueError("raise_index expects a covariant field")
    _check_metric(X.grid, g)
    comps = tuple(c / g.diag[i] for i, c in enumerate(X.components))
    return VectorField(X.grid, comps, variance=CONTRAVARIANT, name=X.name, mask=X.mask)


def lower_index(X: VectorField, g: Metric) -> VectorField:
    if X.variance != CONTRAVARIANT:
        raise ValueError("lower_index expects a contravariant field")
    _check_metric(X.grid, g)
    comps = tuple(c * g.diag[i] for i, c in enumerate(X.components))
    return VectorField(X.grid, comps, variance=COVARIANT, name=X.name, mask=X.mask)


def _check_metric(grid: Grid, g: Metric) -> None:
    if g.n != grid.ndim:
        raise ValueError(f"metric dimension {g.n} does not match grid dimension {grid.ndim}")


def interior_mask(grid: Grid, depth: int = STENCIL_RADIUS) -> np.ndarray:
    """Cells at least `depth` cells away from every non-periodic boundary.

    Composed difference operators are full-order only where every contributing
    stencil is interior, so identity checks typically use depth 2*STENCIL_RADIUS.
    """
    out = np.ones(grid.shape, dtype=bool)
    for a in range(grid.ndim):
        if grid.periodic[a]:
            continue
        out[_slices(grid.ndim, a, 0, depth)] = False
        out[_slices(grid.ndim, a, -depth, None)] = False
    return out


# ---------------------------------------------------------------------------
# masked-value filling and interpolation


def fill_masked(values: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Replace masked cells with the value of the nearest unmasked cell."""
    if mask is None or not mask.any():
        return values
    if mask.all():
        raise ValueError("cannot fill a fully masked field")
    idx = ndimage.distance_transform_edt(mask, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def interpolate_scalar(f: ScalarField, points: np.ndarray, order: int = 3) -> np.ndarray:
    vals = fill_masked(f.values, f.mask)
    return _map_coords(vals, f.grid, points, order)


def interpolate_vector(X: VectorField, points: np.ndarray, order: int = 3) -> np.ndarray:
    filled = [fill_masked(c, X.mask) for c in X.components]
    return np.stack([_map_coords(c, X.grid, points, order) for c in filled], axis=-1)


def _interp_mode(grid: Grid) -> str:
    return "grid-wrap" if all(grid.periodic) else "nearest"


def _map_coords(values: np.ndarray, grid: Grid, points: np.ndarray, order: int) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not grid.contains(pts, pad=1e-9 * max(grid.spacings)).all():
        bad = np.where(~grid.contains(pts))[0]
        raise ValueError(f"points outside grid domain (first offender index {bad[0]})")
    coords = grid.index_coords(pts).T
    return ndimage.map_coordinates(values, coords, order=order, mode=_interp_mode(grid))


class VectorInterpolator:
    """Cubic-spline evaluator for a vector field with the prefilter done once.

    Repeated point evaluation (trajectory stepping, loop quadrature) dominates
    otherwise; masked cells are filled from their nearest live neighbour before
    filtering, so evaluation points should stay clear of masked regions.
    """

    def __init__(self, field: VectorField, order: int = 3):
        self.grid = field.grid
        self.mask = field.mask
        self.order = order
        self._mode = _interp_mode(field.grid)
        self._filtered = [
            ndimage.spline_filter(fill_masked(c, field.mask), order=order, mode=self._mode)
            for c in field.components
        ]

    def at(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if not self.grid.contains(pts, pad=1e-9 * max(self.grid.spacings)).all():
            bad = np.where(~self.grid.contains(pts))[0]
            raise ValueError(f"points outside grid domain (first offender index {bad[0]})")
        coords = self.grid.index_coords(pts).T
        return np.stack(
            [
                ndimage.map_coordinates(
                    c, coords, order=self.order, mode=self._mode, prefilter=False
                )
                for c in self._filtered
            ],
            axis=-1,
        )


def cells_of(grid: Grid, points: np.ndarray) -> tuple:
    """Nearest-cell integer indices for a batch of points."""
    coords = np.rint(grid.index_coords(points)).astype(int)
    for a in range(grid.ndim):
        if grid.periodic[a]:
            coords[:, a] %= grid.counts[a]
        else:
            coords[:, a] = np.clip(coords[:, a], 0, grid.counts[a] - 1)
    return tuple(coords.T)


def integrate(f: ScalarField, g: Metric) -> float:
    """Grid integral of f against the metric volume element."""
    _check_metric(f.grid, g)
    vals = f.values if f.mask is None else np.where(f.mask, 0.0, f.values)
    return float(vals.sum() * g.sqrt_g * f.grid.cell_volume)


def normalize_density(f: ScalarField, g: Metric) -> ScalarField:
    """Rescale a non-negative field to unit integral."""
    total = integrate(f, g)
    if not np.isfinite(total) or total <= 0:
        raise ValueError("field is not normalizable")
    return ScalarField(f.grid, f.values / total, name=f.name, mask=f.mask)
