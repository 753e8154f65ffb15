"""Equations of motion for world ensembles.

Two drive modes share one ensemble representation: a second-order
self-contained mode, where the ensemble's own density generates the quantum
potential that accelerates every world, and a first-order guided mode, where a
momentum field supplied by the oracle sets the velocities directly.  With the
curvature coupling switched off the self-contained mode is plain classical
mechanics.

Each self-contained step freezes the density (and hence the quantum force)
taken from a snapshot of the positions, then performs one velocity-Verlet
kick-drift-kick against that frozen field.  Worlds that stray into masked node
cells receive the force of the nearest live cell and a logged warning, because
the transport law is undefined on nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NodeProximityError, NumericalError, StabilityError
from .grids import (
    CONTRAVARIANT,
    COVARIANT,
    NODE_FLOOR,
    STENCIL_RADIUS,
    Grid,
    Metric,
    ScalarField,
    VectorField,
    cells_of,
    dilate_mask,
    gradient,
    interior_mask,
    interpolate_vector,
    laplace_beltrami,
    raise_index,
)
from .weyl import curvature_coupling
from .ensemble import (
    WorldEnsemble,
    estimate_density_kde,
    estimate_density_spacing_1d,
    no_crossing_1d,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PotentialSpec:
    """Classical potential plus the curvature coupling.

    `potential` may be a ScalarField, a callable mapping (N, n) positions to
    energies, or None for a free system.  `grad` optionally supplies the exact
    classical force so that the coupling->0 limit does not depend on any grid.
    `coupling` is the action-valued constant multiplying the curvature term
    (hbar in physical units); zero recovers classical mechanics exactly.
    """

    potential: object = None
    grad: Callable | None = None
    coupling: float = 1.0
    gamma: float | None = None

    def __post_init__(self):
        if self.coupling < 0:
            raise ValueError("coupling must be nonnegative")

    def gamma_for(self, n: int) -> float:
        return self.gamma if self.gamma is not None else curvature_coupling(n)


@dataclass(frozen=True)
class IntegratorConfig:
    """Time stepping configuration for the self-contained mode."""

    dt: float
    steps: int
    scheme: str = "velocity-verlet"
    refresh: str = "every-step"
    node_floor: float = NODE_FLOOR
    grid: Grid | None = None
    metric: Metric | None = None
    estimator: str = "kde"
    bandwidth: float | None = None
    density_source: Callable[[float], ScalarField] | None = None
    stability_check: bool = True

    def __post_init__(self):
        if self.dt <= 0 or self.steps < 0:
            raise ValueError("need dt > 0 and steps >= 0")
        if self.scheme not in ("velocity-verlet", "euler-guided"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.refresh not in ("every-step", "exact-oracle"):
            raise ValueError(f"unknown density refresh mode {self.refresh!r}")
        if self.refresh == "exact-oracle" and self.density_source is None:
            raise ValueError("exact-oracle refresh needs a density source")
        if self.estimator not in ("kde", "spacing1d"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


def quantum_potential(mu: ScalarField, g: Metric, coupling: float) -> ScalarField:
    """Quantum potential -coupling^2/2 * lap(sqrt mu)/sqrt mu, masked on nodes."""
    if coupling <= 0:
        raise ValueError("coupling must be positive (use the classical path for zero)")
    vals = mu.values
    top = vals.max()
    if top <= 0:
        raise ValueError("density vanishes everywhere")
    mask = vals < NODE_FLOOR * top
    if mu.mask is not None:
        mask |= mu.mask
    if mask.all():
        raise ValueError("density is masked everywhere")
    root = ScalarField(mu.grid, np.sqrt(np.clip(vals, 0.0, None)),
                       mask=mask if mask.any() else None)
    lap = laplace_beltrami(root, g)
    safe = np.where(root.values > 0, root.values, 1.0)
    q = -0.5 * coupling**2 * lap.values / safe
    return ScalarField(mu.grid, q, name="quantum_potential", mask=lap.mask)


def _potential_values(p: PotentialSpec, grid: Grid) -> np.ndarray:
    if p.potential is None:
        return np.zeros(grid.shape)
    if isinstance(p.potential, ScalarField):
        if p.potential.grid != grid:
            raise ValueError("potential field lives on a different grid")
        return p.potential.values
    mesh = grid.meshgrid()
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return np.asarray(p.potential(pts), dtype=float).reshape(grid.shape)


def total_force(p: PotentialSpec, mu: ScalarField | None, g: Metric) -> VectorField:
    """Contravariant force field F^i = -g^ij d_j (V + Q) on the density's grid."""
    if p.coupling > 0:
        if mu is None:
            raise ValueError("the coupled force needs a density")
        q = quantum_potential(mu, g, p.coupling)
        grid = mu.grid
        w = ScalarField(grid, _potential_values(p, grid) + q.values, mask=q.mask)
    else:
        if mu is None:
            raise ValueError("grid force needs a grid; supply a density or use grad")
        grid = mu.grid
        w = ScalarField(grid, _potential_values(p, grid))
    grad_w = gradient(w)
    force = raise_index(
        VectorField(grid, tuple(-c for c in grad_w.components), variance=COVARIANT,
                    mask=grad_w.mask),
        g,
    )
    return VectorField(grid, force.components, variance=CONTRAVARIANT,
                       name="force", mask=grad_w.mask)


def force_at(force_field: VectorField, positions: np.ndarray,
             warn_label: str = "") -> np.ndarray:
    """Interpolate a grid force at world positions, extrapolating across masks."""
    if force_field.mask is not None and force_field.mask.any():
        cells = cells_of(force_field.grid, positions)
        inside = force_field.mask[cells]
        if inside.any():
            idx = np.where(inside)[0]
            logger.warning(
                "%s: %d world(s) inside masked node region (first index %d); "
                "forces extrapolated from nearest live cells",
                warn_label or "force evaluation", idx.size, idx[0],
            )
    return interpolate_vector(force_field, positions)


def _density_estimate(e: WorldEnsemble, cfg: IntegratorConfig, g: Metric) -> ScalarField:
    if cfg.refresh == "exact-oracle":
        return cfg.density_source(e.time)
    if cfg.grid is None:
        raise ValueError("every-step refresh needs a grid in the config")
    if cfg.estimator == "spacing1d":
        return estimate_density_spacing_1d(e, cfg.grid, g).field
    return estimate_density_kde(e, cfg.grid, cfg.bandwidth, g).field


def _classical_acceleration(p: PotentialSpec, g: Metric, positions: np.ndarray) -> np.ndarray:
    grad_v = np.asarray(p.grad(positions), dtype=float)
    return -grad_v / g.diag


def step_self_contained(e: WorldEnsemble, p: PotentialSpec, cfg: IntegratorConfig,
                        g: Metric | None = None) -> WorldEnsemble:
    """One velocity-Verlet step with the density (hence Q) frozen at step start."""
    g = g or cfg.metric or Metric(np.ones(e.ndim))
    dt = cfg.dt
    closed_form = p.coupling == 0 and p.grad is not None
    if closed_form:
        acc = lambda q: _classical_acceleration(p, g, q)
    else:
        mu = _density_estimate(e, cfg, g)
        force_field = total_force(p, mu, g)
        acc = lambda q: force_at(force_field, q, warn_label=f"t={e.time:.4g}")
    with np.errstate(over="ignore", invalid="ignore"):
        a0 = acc(e.positions)
        v_half = e.velocities + 0.5 * dt * a0
        q_new = e.positions + dt * v_half
        if not np.isfinite(q_new).all():
            bad = np.where(~np.isfinite(q_new).all(axis=1))[0]
            raise NumericalError(
                f"non-finite position at t={e.time + dt:.6g}, first world {bad[0]}"
            )
        a1 = acc(q_new)
        v_new = v_half + 0.5 * dt * a1
    if not np.isfinite(v_new).all():
        bad = np.where(~np.isfinite(v_new).all(axis=1))[0]
        raise NumericalError(
            f"non-finite velocity at t={e.time + dt:.6g}, first world {bad[0]}"
        )
    out = e.advanced(q_new, v_new, dt)
    if e.ndim == 1 and not no_crossing_1d(out):
        logger.warning("world crossing detected in 1D at t=%.6g", out.time)
    return out


def stability_limit(p: PotentialSpec, cfg: IntegratorConfig, e: WorldEnsemble,
                    g: Metric) -> float:
    """Largest admissible dt: 0.1 min(h / speed scale, 2 pi / omega estimate)."""
    limits = []
    if cfg.grid is not None and not (p.coupling == 0 and p.grad is not None):
        mu = _density_estimate(e, cfg, g)
        w = _potential_values(p, cfg.grid)
        if p.coupling > 0:
            q = quantum_potential(mu, g, p.coupling)
            w = w + np.where(q.valid, q.values, 0.0)
        w_max = np.abs(w).max()
        if w_max > 0:
            speed = np.sqrt(2.0 * w_max / g.diag.min())
            limits.append(min(cfg.grid.spacings) / speed)
        # local curvature of the effective potential bounds the fastest mode
        wf = ScalarField(cfg.grid, w)
        lap = laplace_beltrami(wf, g)
        curv = np.abs(lap.values).max()
        if curv > 0:
            limits.append(2.0 * np.pi / np.sqrt(curv))
    elif p.grad is not None:
        # probe the force gradient around the ensemble centroid
        center = e.positions.mean(axis=0, keepdims=True)
        span = max(np.abs(e.positions - center).max(), 1e-6)
        eps = 1e-4 * span
        omega_sq = 0.0
        for a in range(e.ndim):
            d = np.zeros((1, e.ndim))
            d[0, a] = eps
            df = (p.grad(center + d) - p.grad(center - d))[0, a] / (2 * eps)
            omega_sq = max(omega_sq, abs(df) / g.diag[a])
        if omega_sq > 0:
            limits.append(2.0 * np.pi / np.sqrt(omega_sq))
    if not limits:
        return np.inf
    return 0.1 * min(limits)


def run_self_contained(
    e: WorldEnsemble, p: PotentialSpec, cfg: IntegratorConfig,
    g: Metric | None = None, on_step: Callable | None = None,
) -> WorldEnsemble:
    """Integrate the self-contained dynamics for cfg.steps steps."""
    g = g or cfg.metric or Metric(np.ones(e.ndim))
    if cfg.scheme != "velocity-verlet":
        raise ValueError("self-contained mode uses the velocity-verlet scheme")
    if cfg.stability_check:
        limit = stability_limit(p, cfg, e, g)
        if cfg.dt > limit:
            raise StabilityError(
                f"dt={cfg.dt:.3g} exceeds the stability gate {limit:.3g}"
            )
    for k in range(cfg.steps):
        e = step_self_contained(e, p, cfg, g)
        if on_step is not None:
            on_step(k + 1, e)
    return e


# ---------------------------------------------------------------------------
# guided (first-order) mode


MomentumSource = Callable[[float], VectorField]


class PreparedMomentum:
    """Momentum source with cached spline prefilters, keyed by evaluation time.

    Wraps a static phase field, a static covariant momentum field, or a
    callable t -> field.  The spline prefilter is the expensive part of cubic
    interpolation on 3D grids, so the last few evaluation times are cached
    (consecutive midpoint steps revisit the same times).
    """

    def __init__(self, momentum, g: Metric):
        self._momentum = momentum
        self._metric = g
        self._cache: dict = {}

    def _field(self, t: float) -> tuple:
        key = t if callable(self._momentum) else None
        if key in self._cache:
            return self._cache[key]
        raw = self._momentum(t) if callable(self._momentum) else self._momentum
        if isinstance(raw, ScalarField):
            raw = gradient(raw)
        if not isinstance(raw, VectorField):
            raise ValueError("guidance needs a phase field, a momentum field, or a source")
        if raw.variance != COVARIANT:
            raise ValueError("the guidance momentum must be covariant")
        from .grids import VectorInterpolator

        entry = (raw, VectorInterpolator(raw))
        if len(self._cache) > 4:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = entry
        return entry

    def velocities(self, positions: np.ndarray, t: float) -> np.ndarray:
        field, interp = self._field(t)
        if field.mask is not None and field.mask.any():
            cells = cells_of(field.grid, positions)
            if field.mask[cells].any():
                bad = int(np.where(field.mask[cells])[0][0])
                raise NodeProximityError(
                    f"world {bad} entered a masked node region during guidance"
                )
        return interp.at(positions) / np.asarray(self._metric.diag)


def step_guided(e: WorldEnsemble, momentum, g: Metric, dt: float) -> WorldEnsemble:
    """One explicit midpoint step of the first-order guidance law q_dot = g^ij p_j.

    `momentum` is a phase ScalarField, a covariant VectorField, a callable
    t -> VectorField (evaluated at the half and full step for time dependence),
    or an already prepared source.
    """
    if not isinstance(momentum, PreparedMomentum):
        momentum = PreparedMomentum(momentum, g)
    k1 = momentum.velocities(e.positions, e.time)
    q_mid = e.positions + 0.5 * dt * k1
    k2 = momentum.velocities(q_mid, e.time + 0.5 * dt)
    q_new = e.positions + dt * k2
    v_new = momentum.velocities(q_new, e.time + dt)
    return e.advanced(q_new, v_new, dt)


def run_guided(e: WorldEnsemble, momentum, g: Metric, dt: float, steps: int,
               on_step: Callable | None = None) -> WorldEnsemble:
    source = momentum if isinstance(momentum, PreparedMomentum) else PreparedMomentum(momentum, g)
    for k in range(steps):
        e = step_guided(e, source, g, dt)
        if e.ndim == 1 and not no_crossing_1d(e):
            logger.warning("world crossing detected in 1D at step %d", k + 1)
        if on_step is not None:
            on_step(k + 1, e)
    return e


# ---------------------------------------------------------------------------
# residual diagnostics


def _middle_time_derivative(series: Sequence[ScalarField], dt: float) -> tuple:
    if len(series) < 2:
        raise ValueError("need at least two consecutive snapshots")
    if len(series) >= 3:
        k = len(series) // 2
        dv = (series[k + 1].values - series[k - 1].values) / (2 * dt)
        return dv, k
    return (series[1].values - series[0].values) / dt, 0


def continuity_residual(mu_series: Sequence[ScalarField], vel: VectorField,
                        g: Metric, dt: float) -> float:
    """Max interior residual of d_t(sqrt g mu) + d_i(sqrt g mu qdot^i)."""
    if vel.variance != CONTRAVARIANT:
        raise ValueError("continuity residual needs a contravariant velocity")
    dmu_dt, k = _middle_time_derivative(mu_series, dt)
    mid = mu_series[k]
    grid = mid.grid
    sq = g.sqrt_g
    flux = VectorField(
        grid,
        tuple(mid.values * c for c in vel.components),
        variance=CONTRAVARIANT,
        mask=vel.mask,
    )
    div = np.zeros(grid.shape)
    from .grids import _diff1

    for a in range(grid.ndim):
        div += _diff1(sq * flux.components[a], grid.spacings[a], a, grid.periodic[a])
    resid = np.abs(sq * dmu_dt + div)
    region = interior_mask(grid)
    if vel.mask is not None:
        region &= ~dilate_mask(vel.mask, grid)
    return float(resid[region].max())


def hamilton_jacobi_residual(
    s_series: Sequence[ScalarField], mu: ScalarField, p: PotentialSpec,
    g: Metric, dt: float, mu_floor: float = 1e-6,
) -> float:
    """Max residual of d_t S + 1/2 g^ij d_i S d_j S + V + Q on the live region.

    The evaluation region keeps interior cells whose density is above
    `mu_floor` times its peak, which excludes node-adjacent cells where the
    phase is not single valued.
    """
    ds_dt, k = _middle_time_derivative(s_series, dt)
    mid = s_series[k]
    grid = mid.grid
    grad_s = gradient(mid)
    kinetic = np.zeros(grid.shape)
    for a, c in enumerate(grad_s.components):
        kinetic += 0.5 * c * c / g.diag[a]
    v_vals = _potential_values(p, grid)
    if p.coupling > 0:
        q = quantum_potential(mu, g, p.coupling)
        q_vals = np.where(q.valid, q.values, 0.0)
        q_valid = q.valid
    else:
        q_vals = np.zeros(grid.shape)
        q_valid = np.ones(grid.shape, dtype=bool)
    resid = np.abs(ds_dt + kinetic + v_vals + q_vals)
    region = interior_mask(grid, depth=2 * STENCIL_RADIUS)
    region &= mu.values >= mu_floor * mu.values.max()
    region &= q_valid & mu.valid
    if not region.any():
        raise ValueError("empty evaluation region for the Hamilton-Jacobi residual")
    return float(resid[region].max())


def world_energy(e: WorldEnsemble, p: PotentialSpec, g: Metric,
                 mu: ScalarField | None = None) -> np.ndarray:
    """Per-world energy 1/2 g_ij qdot^i qdot^j + V + Q (Q interpolated from mu)."""
    kinetic = 0.5 * np.sum(g.diag * e.velocities**2, axis=1)
    total = kinetic.copy()
    if p.potential is not None:
        if isinstance(p.potential, ScalarField):
            from .grids import interpolate_scalar

            total += interpolate_scalar(p.potential, e.positions)
        else:
            total += np.asarray(p.potential(e.positions), dtype=float)
    if p.coupling > 0 and mu is not None:
        from .grids import interpolate_scalar

        q = quantum_potential(mu, g, p.coupling)
        total += interpolate_scalar(q, e.positions)
    return total
