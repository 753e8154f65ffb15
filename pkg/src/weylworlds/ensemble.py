"""World ensembles: sampling, density estimation, and distribution diagnostics.

Worlds are labelled forever by their initial position; labels and positions are
kept as separate arrays so relabelling never silently happens.  Density
estimates read a frozen snapshot of positions and are deterministic for a given
seed (fixed-order accumulation).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateSpacingError
from .grids import Grid, Metric, ScalarField, integrate, normalize_density

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldEnsemble:
    """N world-points in configuration space with immutable initial-position labels."""

    labels: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        lab = np.atleast_2d(np.asarray(self.labels, dtype=float))
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        vel = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        if not (lab.shape == pos.shape == vel.shape):
            raise ValueError("labels, positions and velocities must share a shape")
        if lab.shape[0] < 2:
            raise ValueError("an ensemble needs at least two worlds")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("positions and velocities must be finite")
        if _has_duplicate_rows(lab):
            raise ValueError("world labels must be pairwise distinct")
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)

    @property
    def count(self) -> int:
        return self.labels.shape[0]

    @property
    def ndim(self) -> int:
        return self.labels.shape[1]

    def advanced(self, positions, velocities, dt) -> "WorldEnsemble":
        return replace(self, positions=positions, velocities=velocities, time=self.time + dt)


def _has_duplicate_rows(arr: np.ndarray) -> bool:
    order = np.lexsort(arr.T)
    diffs = np.diff(arr[order], axis=0)
    return bool(np.any(np.all(diffs == 0, axis=1)))


def no_crossing_1d(e: WorldEnsemble) -> bool:
    """Whether the 1D sort order of positions still matches the label order."""
    if e.ndim != 1:
        raise ValueError("crossing check is defined in one dimension")
    order = np.argsort(e.labels[:, 0])
    return bool(np.all(np.diff(e.positions[order, 0]) > 0))


@dataclass(frozen=True)
class DensityEstimate:
    """Normalized density on a grid plus the method that produced it."""

    field: ScalarField
    method: str
    bandwidth: float | None = None


def sample_from_density(mu_ref: ScalarField, n_worlds: int, seed: int,
                        metric: Metric | None = None) -> WorldEnsemble:
    """Draw i.i.d. world positions from a grid density.

    Cells are drawn from the discrete measure mu sqrt(g) dV and positions are
    jittered uniformly inside each cell, which realises the inverse transform
    of the piecewise-constant density (separable per axis by construction).
    Deterministic for a fixed seed; labels are the initial positions.
    """
    if n_worlds < 2:
        raise ValueError("need at least two worlds")
    grid = mu_ref.grid
    metric = metric or Metric(np.ones(grid.ndim))
    vals = np.where(mu_ref.valid, mu_ref.values, 0.0)
    if np.any(vals < 0) or not np.isfinite(vals).all() or vals.sum() <= 0:
        raise ValueError("reference density is not normalizable")
    probs = (vals / vals.sum()).ravel()
    rng = np.random.default_rng(seed)
    flat = np.searchsorted(np.cumsum(probs), rng.random(n_worlds), side="right")
    flat = np.clip(flat, 0, probs.size - 1)
    idx = np.column_stack(np.unravel_index(flat, grid.shape)).astype(float)
    jitter = rng.random((n_worlds, grid.ndim)) - 0.5
    for a in range(grid.ndim):
        if grid.periodic[a]:
            continue
        # boundary cells are half-cells: fold the jitter inward
        low = idx[:, a] == 0
        high = idx[:, a] == grid.counts[a] - 1
        jitter[low, a] = np.abs(jitter[low, a])
        jitter[high, a] = -np.abs(jitter[high, a])
    mins = np.asarray(grid.mins)
    h = np.asarray(grid.spacings)
    positions = mins + (idx + jitter) * h
    velocities = np.zeros_like(positions)
    return WorldEnsemble(positions.copy(), positions, velocities, time=0.0)


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-axis Silverman rule bandwidth for a sample array of shape (N, n)."""
    x = np.atleast_2d(samples)
    n, d = x.shape
    std = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    spread = np.minimum(std, (q75 - q25) / 1.34)
    spread = np.where(spread > 0, spread, np.maximum(std, 1e-12))
    return 0.9 * spread * n ** (-1.0 / (d + 4))


def estimate_density_kde(
    e: WorldEnsemble, grid: Grid, bandwidth: float | np.ndarray | None = None,
    metric: Metric | None = None,
) -> DensityEstimate:
    """Gaussian-kernel density of the worlds on a grid, normalized to unit mass."""
    metric = metric or Metric(np.ones(grid.ndim))
    if bandwidth is None:
        bandwidth = silverman_bandwidth(e.positions)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (grid.ndim,)).copy()
    if np.any(bw <= 0):
        raise ValueError("bandwidth must be positive")
    if np.any(bw <= np.asarray(grid.spacings)):
        raise ValueError("bandwidth must exceed the grid spacing")
    edges = []
    for a in range(grid.ndim):
        ax = grid.axis(a)
        h = grid.spacings[a]
        edges.append(np.concatenate([ax - h / 2, [ax[-1] + h / 2]]))
    hist, _ = np.histogramdd(e.positions, bins=edges)
    sigma_cells = bw / np.asarray(grid.spacings)
    mode = ["wrap" if p else "constant" for p in grid.periodic]
    smooth = ndimage.gaussian_filter(hist, sigma=sigma_cells, mode=mode)
    smooth = np.clip(smooth, 0.0, None)
    field = normalize_density(ScalarField(grid, smooth, name="mu_kde"), metric)
    return DensityEstimate(field, method="kde", bandwidth=float(np.max(bw)))


def estimate_density_spacing_1d(
    e: WorldEnsemble, grid: Grid, metric: Metric | None = None,
    smoothing: float | None = None,
) -> DensityEstimate:
    """Reciprocal-spacing density for a 1D ensemble, interpolated to a grid.

    The density at the midpoint between neighbouring worlds is 1/(N * spacing).
    Raw adjacent gaps carry exponential noise, so the interpolated values are
    smoothed with a Gaussian kernel at the Silverman scale of the sample
    (`smoothing=0` keeps the raw interpolant).  Coincident worlds are
    degenerate.
    """
    if e.ndim != 1:
        raise ValueError("spacing estimator is one-dimensional")
    metric = metric or Metric(np.ones(1))
    q = np.sort(e.positions[:, 0])
    gaps = np.diff(q)
    if np.any(gaps <= 0):
        raise DegenerateSpacingError("coincident world positions")
    # density between worlds k and k+1 is 1/(N gap_k); deposit it cell-averaged
    # via the linearly interpolated empirical mass function (mass conserving)
    x = grid.axis(0)
    h = grid.spacings[0]
    edges = np.concatenate([x - h / 2, [x[-1] + h / 2]])
    mass = np.interp(edges, q, np.arange(e.count) / (e.count - 1))
    vals = np.diff(mass) / h
    if smoothing is None:
        smoothing = float(silverman_bandwidth(e.positions)[0])
    if smoothing > 0:
        vals = ndimage.gaussian_filter1d(vals, smoothing / h, mode="nearest")
    field = normalize_density(ScalarField(grid, vals, name="mu_spacing"), metric)
    return DensityEstimate(field, method="spacing1d")


def _marginal_cdf(mu: ScalarField, metric: Metric, axis: int) -> tuple:
    """Grid coordinates and CDF of the density marginal along one axis."""
    vals = np.where(mu.valid, mu.values, 0.0)
    other = tuple(a for a in range(mu.grid.ndim) if a != axis)
    marg = vals.sum(axis=other) if other else vals.copy()
    marg = marg / marg.sum()
    cdf = np.cumsum(marg)
    return mu.grid.axis(axis), cdf


def ks_distance(samples: np.ndarray, mu_ref: ScalarField, metric: Metric | None = None,
                axis: int = 0) -> float:
    """One-sample Kolmogorov-Smirnov distance of a marginal against a grid density."""
    metric = metric or Metric(np.ones(mu_ref.grid.ndim))
    x_grid, cdf = _marginal_cdf(mu_ref, metric, axis)
    x = np.sort(np.atleast_2d(samples)[:, axis])
    n = x.size
    # interpolate the reference CDF at the sample points (right-continuous steps)
    ref = np.interp(x, x_grid, cdf, left=0.0, right=1.0)
    upper = np.abs(np.arange(1, n + 1) / n - ref).max()
    lower = np.abs(ref - np.arange(0, n) / n).max()
    return float(max(upper, lower))


def distribution_distance(
    e: WorldEnsemble, mu_ref: ScalarField, metric: Metric | None = None,
    bandwidth: float | np.ndarray | None = None,
) -> dict:
    """KS distance on marginals plus L1 distance between the KDE and the reference."""
    grid = mu_ref.grid
    metric = metric or Metric(np.ones(grid.ndim))
    ks = max(ks_distance(e.positions, mu_ref, metric, axis=a) for a in range(grid.ndim))
    kde = estimate_density_kde(e, grid, bandwidth, metric)
    ref = normalize_density(mu_ref, metric)
    diff = np.abs(kde.field.values - ref.values)
    l1 = float(diff.sum() * metric.sqrt_g * grid.cell_volume)
    return {"ks": ks, "l1": l1}


# ---------------------------------------------------------------------------
# snapshot serialization


def write_snapshot_header(fh, ndim: int) -> None:
    writer = csv.writer(fh)
    cols = ["t", "world_index"]
    cols += [f"label_{a}" for a in range(ndim)]
    cols += [f"pos_{a}" for a in range(ndim)]
    cols += [f"vel_{a}" for a in range(ndim)]
    writer.writerow(cols)


def append_snapshot(fh, e: WorldEnsemble) -> None:
    writer = csv.writer(fh)
    for i in range(e.count):
        row = [repr(float(e.time)), i]
        row += [repr(float(v)) for v in e.labels[i]]
        row += [repr(float(v)) for v in e.positions[i]]
        row += [repr(float(v)) for v in e.velocities[i]]
        writer.writerow(row)


def ensemble_to_csv(e: WorldEnsemble, path) -> None:
    with open(path, "w", newline="") as fh:
        write_snapshot_header(fh, e.ndim)
        append_snapshot(fh, e)


def ensemble_from_csv(path, time: float | None = None) -> WorldEnsemble:
    """Load one snapshot (the latest, or the one at `time`) from a trajectory CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ndim = sum(1 for c in header if c.startswith("label_"))
        rows = [row for row in reader]
    times = np.array([float(r[0]) for r in rows])
    target = times.max() if time is None else time
    sel = [r for r, t in zip(rows, times) if t == target]
    labels = np.array([[float(v) for v in r[2 : 2 + ndim]] for r in sel])
    pos = np.array([[float(v) for v in r[2 + ndim : 2 + 2 * ndim]] for r in sel])
    vel = np.array([[float(v) for v in r[2 + 2 * ndim : 2 + 3 * ndim]] for r in sel])
    return WorldEnsemble(labels, pos, vel, time=float(target))
