"""Independent ground truth: spectral Schrodinger evolution and closed-form states.

The trajectory dynamics never feeds back into this module, so its densities,
phase gradients, and velocities can serve as an external reference for every
cross-check.  Evolution uses Strang splitting with the kinetic factor applied
exactly in Fourier space; the mass metric enters only through the dispersion
relation, so particle masses live in one place.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainTooSmallError
from .grids import (
    COVARIANT,
    NODE_FLOOR,
    Grid,
    Metric,
    ScalarField,
    VectorField,
    _diff1,
)

_MAGIC = b"WWF1"


@dataclass(frozen=True)
class WaveFunction:
    """Complex amplitude on a grid at a fixed time, with its mass metric."""

    grid: Grid
    values: np.ndarray
    t: float
    metric: Metric

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ValueError("wavefunction shape does not match grid")
        if self.metric.n != self.grid.ndim:
            raise ValueError("metric dimension does not match grid")
        object.__setattr__(self, "values", v)

    @property
    def density_values(self) -> np.ndarray:
        return np.abs(self.values) ** 2


def norm(psi: WaveFunction) -> float:
    w = psi.metric.sqrt_g * psi.grid.cell_volume
    return float(np.sqrt((np.abs(psi.values) ** 2).sum() * w))


def inner_product(a: WaveFunction, b: WaveFunction) -> complex:
    if a.grid != b.grid:
        raise ValueError("wavefunctions live on different grids")
    w = a.metric.sqrt_g * a.grid.cell_volume
    return complex((np.conj(a.values) * b.values).sum() * w)


def normalized(psi: WaveFunction) -> WaveFunction:
    n = norm(psi)
    if n == 0:
        raise ValueError("cannot normalize the zero state")
    return WaveFunction(psi.grid, psi.values / n, psi.t, psi.metric)


def boundary_amplitude(psi: WaveFunction) -> float:
    """Largest |psi| on the outermost grid layer, relative to the global peak."""
    mags = np.abs(psi.values)
    peak = mags.max()
    if peak == 0:
        return 0.0
    worst = 0.0
    for a in range(psi.grid.ndim):
        sl = [slice(None)] * psi.grid.ndim
        for edge in (0, -1):
            sl[a] = edge
            worst = max(worst, float(mags[tuple(sl)].max()))
    return worst / peak


def _wavenumbers(grid: Grid) -> list:
    ks = []
    for a in range(grid.ndim):
        ks.append(2 * np.pi * np.fft.fftfreq(grid.counts[a], d=grid.spacings[a]))
    return ks


def split_step_evolve(
    psi: WaveFunction,
    V: ScalarField | None,
    dt: float,
    steps: int,
    hbar: float = 1.0,
    boundary_tol: float = 1e-10,
) -> WaveFunction:
    """Strang-split evolution under H = (1/2) g^ij p_i p_j + V.

    Requires a fully periodic grid padded so the boundary amplitude stays below
    `boundary_tol`, and a time step that resolves the fastest kinetic phase on
    the grid.  Norm is preserved to rounding (the two split factors are unitary).
    """
    grid = psi.grid
    if not all(grid.periodic):
        raise ValueError("spectral evolution needs a fully periodic grid")
    if steps < 0 or dt <= 0:
        raise ValueError("need dt > 0 and steps >= 0")
    if boundary_amplitude(psi) > boundary_tol:
        raise DomainTooSmallError(
            "boundary amplitude above threshold; enlarge the grid padding"
        )
    ks = _wavenumbers(grid)
    disp = np.zeros(grid.shape)
    for a, k in enumerate(ks):
        shape = [1] * grid.ndim
        shape[a] = -1
        disp = disp + (hbar * k.reshape(shape) ** 2) / (2 * psi.metric.diag[a])
    if dt * disp.max() > np.pi:
        raise ValueError("dt does not resolve the maximum kinetic frequency")
    kin = np.exp(-1j * dt * disp)
    if V is not None:
        if V.grid != grid:
            raise ValueError("potential grid mismatch")
        pot = np.exp(-0.5j * dt * V.values / hbar)
    else:
        pot = None
    values = psi.values.copy()
    for _ in range(steps):
        if pot is not None:
            values = values * pot
        values = np.fft.ifftn(np.fft.fftn(values) * kin)
        if pot is not None:
            values = values * pot
    out = WaveFunction(grid, values, psi.t + steps * dt, psi.metric)
    if boundary_amplitude(out) > boundary_tol:
        raise DomainTooSmallError("state reached the grid boundary during evolution")
    return out


def decompose(
    psi: WaveFunction, hbar: float = 1.0, floor: float = NODE_FLOOR
) -> tuple:
    """Split a state into its density and covariant momentum field.

    The momentum is hbar Im(conj(psi) d_i psi) / |psi|^2, which is single
    valued by construction and never requires unwrapping a phase.  Cells with
    density below the node floor are masked.  Periodic grids use spectral
    derivatives; otherwise the central-difference stencils are used.
    """
    grid = psi.grid
    mu_vals = psi.density_values
    mask = mu_vals < floor * mu_vals.max()
    if not mask.any():
        mask = None
    mu = ScalarField(grid, mu_vals, name="mu", mask=mask)
    comps = []
    safe = np.where(mu_vals > 0, mu_vals, 1.0)
    for a in range(grid.ndim):
        dpsi = _spectral_or_fd_derivative(psi.values, grid, a)
        comps.append(hbar * np.imag(np.conj(psi.values) * dpsi) / safe)
    p = VectorField(grid, tuple(comps), variance=COVARIANT, name="momentum", mask=mask)
    return mu, p


def _spectral_or_fd_derivative(values: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    if grid.periodic[axis]:
        k = 2 * np.pi * np.fft.fftfreq(grid.counts[axis], d=grid.spacings[axis])
        shape = [1] * grid.ndim
        shape[axis] = -1
        ft = np.fft.fft(values, axis=axis)
        return np.fft.ifft(1j * k.reshape(shape) * ft, axis=axis)
    re = _diff1(values.real, grid.spacings[axis], axis, False)
    im = _diff1(values.imag, grid.spacings[axis], axis, False)
    return re + 1j * im


# ---------------------------------------------------------------------------
# closed-form states


class AnalyticState:
    """Closed-form reference state: density, phase gradient, and node locus."""

    mass: float = 1.0

    def wavefunction(self, grid: Grid, t: float, metric: Metric | None = None) -> WaveFunction:
        raise NotImplementedError

    def density(self, grid: Grid, t: float, metric: Metric | None = None) -> ScalarField:
        psi = self.wavefunction(grid, t, metric)
        return ScalarField(grid, psi.density_values, name="mu")

    def phase_gradient(self, points: np.ndarray, t: float) -> np.ndarray:
        """Covariant momentum d_i S at arbitrary points, shape (npts, ndim)."""
        raise NotImplementedError

    def phase_values(self, grid: Grid, t: float) -> ScalarField:
        """Single-valued phase S; only defined for winding-free states."""
        raise NotImplementedError(f"{type(self).__name__} has no global phase function")

    def node_locus(self):
        """Description of the zero set, or None when the density is positive."""
        return None

    def default_metric(self, ndim: int) -> Metric:
        return Metric(np.full(ndim, self.mass))


def _grid_normalized(grid: Grid, values: np.ndarray, t: float, metric: Metric) -> WaveFunction:
    psi = WaveFunction(grid, values, t, metric)
    return normalized(psi)


@dataclass(frozen=True)
class HOGroundState(AnalyticState):
    """Ground state of the isotropic harmonic oscillator, energy n*hbar*omega/2."""

    mass: float = 1.0
    omega: float = 1.0
    hbar: float = 1.0

    def energy(self, ndim: int) -> float:
        return 0.5 * ndim * self.hbar * self.omega

    def wavefunction(self, grid, t, metric=None):
        metric = metric or self.default_metric(grid.ndim)
        mesh = grid.meshgrid()
        expo = np.zeros(grid.shape)
        for a, x in enumerate(mesh):
            expo += metric.diag[a] * self.omega * x**2 / (2 * self.hbar)
        phase = -self.energy(grid.ndim) * t / self.hbar
        return _grid_normalized(grid, np.exp(-expo) * np.exp(1j * phase), t, metric)

    def phase_gradient(self, points, t):
        pts = np.atleast_2d(points)
        return np.zeros_like(pts, dtype=float)

    def phase_values(self, grid, t):
        return ScalarField(grid, np.full(grid.shape, -self.energy(grid.ndim) * t), name="S")


def _spread_factor(t: float, mass: float, sigma0: float, hbar: float) -> tuple:
    b = hbar / (2 * mass * sigma0**2)
    s = math.sqrt(1.0 + (b * t) ** 2)
    return b, s


@dataclass(frozen=True)
class FreeGaussianState(AnalyticState):
    """Freely spreading Gaussian packet, width sigma0 sqrt(1 + (hbar t / 2 m sigma0^2)^2)."""

    mass: float = 1.0
    sigma0: float = 1.0
    center: tuple = (0.0,)
    drift: tuple | None = None
    hbar: float = 1.0

    def width(self, t: float) -> float:
        _, s = _spread_factor(t, self.mass, self.sigma0, self.hbar)
        return self.sigma0 * s

    def _drift(self, ndim: int) -> np.ndarray:
        if self.drift is None:
            return np.zeros(ndim)
        return np.asarray(self.drift, dtype=float)

    def wavefunction(self, grid, t, metric=None):
        metric = metric or self.default_metric(grid.ndim)
        b, _ = _spread_factor(t, self.mass, self.sigma0, self.hbar)
        mesh = grid.meshgrid()
        v = self._drift(grid.ndim)
        denom = 4 * self.sigma0**2 * (1 + 1j * b * t)
        out = np.ones(grid.shape, dtype=complex)
        for a, x in enumerate(mesh):
            xi = x - self.center[a] - v[a] * t
            out = out * np.exp(-(xi**2) / denom)
            out = out * np.exp(
                1j * self.mass * v[a] * (x - self.center[a]) / self.hbar
                - 0.5j * self.mass * v[a] ** 2 * t / self.hbar
            )
        return _grid_normalized(grid, out, t, metric)

    def phase_gradient(self, points, t):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        b, s = _spread_factor(t, self.mass, self.sigma0, self.hbar)
        v = self._drift(pts.shape[1])
        rate = b * b * t / (s * s)  # sdot / s
        out = np.empty_like(pts)
        for a in range(pts.shape[1]):
            xi = pts[:, a] - self.center[a] - v[a] * t
            out[:, a] = self.mass * (v[a] + xi * rate)
        return out

    def phase_values(self, grid, t):
        b, s = _spread_factor(t, self.mass, self.sigma0, self.hbar)
        mesh = grid.meshgrid()
        v = self._drift(grid.ndim)
        vals = np.zeros(grid.shape)
        for a, x in enumerate(mesh):
            xi = x - self.center[a] - v[a] * t
            vals += self.hbar * (
                xi**2 * b * t / (4 * self.sigma0**2 * s**2) - 0.5 * math.atan(b * t)
            )
            vals += self.mass * v[a] * (x - self.center[a]) - 0.5 * self.mass * v[a] ** 2 * t
        return ScalarField(grid, vals, name="S")


@dataclass(frozen=True)
class AngularEigenstate3D(AnalyticState):
    """Stationary vortex state in n=3: amplitude rho^|m| e^(i m theta) times an envelope.

    The density vanishes on the z axis like rho^(2|m|), a codimension-2 node,
    and the momentum field is purely azimuthal with magnitude hbar |m| / rho.
    `envelope_sigma_z` of None leaves the state uniform along z (use a
    z-periodic grid in that case).
    """

    winding: int = 1
    mass: float = 1.0
    envelope_sigma: float = 1.0
    envelope_sigma_z: float | None = None
    hbar: float = 1.0

    def wavefunction(self, grid, t, metric=None):
        if grid.ndim != 3:
            raise ValueError("angular eigenstate is a three-dimensional fixture")
        metric = metric or self.default_metric(3)
        X, Y, Z = grid.meshgrid()
        m = self.winding
        core = (X + 1j * np.sign(m) * Y) ** abs(m)
        envelope = np.exp(-(X**2 + Y**2) / (2 * self.envelope_sigma**2))
        if self.envelope_sigma_z is not None:
            envelope = envelope * np.exp(-(Z**2) / (2 * self.envelope_sigma_z**2))
        return _grid_normalized(grid, core * envelope, t, metric)

    def phase_gradient(self, points, t):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rho2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        out = np.zeros_like(pts)
        safe = np.where(rho2 > 0, rho2, 1.0)
        out[:, 0] = -self.hbar * self.winding * pts[:, 1] / safe
        out[:, 1] = self.hbar * self.winding * pts[:, 0] / safe
        return out

    def node_locus(self):
        return {"kind": "line", "point": (0.0, 0.0, 0.0), "direction": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class DoubleGaussianState(AnalyticState):
    """Superposition of two free Gaussian packets with a relative phase.

    A relative phase of pi with mirrored centers produces an exact zero plane
    between the lobes (a codimension-1 node).
    """

    mass: float = 1.0
    sigma0: float = 1.0
    center_a: tuple = (-1.0,)
    center_b: tuple = (1.0,)
    rel_phase: float = 0.0
    hbar: float = 1.0

    def _packets(self):
        a = FreeGaussianState(self.mass, self.sigma0, tuple(self.center_a), None, self.hbar)
        b = FreeGaussianState(self.mass, self.sigma0, tuple(self.center_b), None, self.hbar)
        return a, b

    def wavefunction(self, grid, t, metric=None):
        metric = metric or self.default_metric(grid.ndim)
        a, b = self._packets()
        psi_a = a.wavefunction(grid, t, metric)
        psi_b = b.wavefunction(grid, t, metric)
        values = psi_a.values + np.exp(1j * self.rel_phase) * psi_b.values
        return _grid_normalized(grid, values, t, metric)

    def phase_gradient(self, points, t):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a, b = self._packets()
        psi_a, grad_a = _free_packet_at(a, pts, t)
        psi_b, grad_b = _free_packet_at(b, pts, t)
        phase = np.exp(1j * self.rel_phase)
        psi = psi_a + phase * psi_b
        dens = np.abs(psi) ** 2
        safe = np.where(dens > 0, dens, 1.0)
        out = np.empty_like(pts)
        for axis in range(pts.shape[1]):
            dpsi = grad_a[:, axis] * psi_a + phase * grad_b[:, axis] * psi_b
            out[:, axis] = self.hbar * np.imag(np.conj(psi) * dpsi) / safe
        return out

    def node_locus(self):
        if abs((self.rel_phase % (2 * np.pi)) - np.pi) > 1e-12:
            return None
        mid = tuple(0.5 * (p + q) for p, q in zip(self.center_a, self.center_b))
        normal = tuple(q - p for p, q in zip(self.center_a, self.center_b))
        return {"kind": "plane", "point": mid, "normal": normal}


def _free_packet_at(state: FreeGaussianState, pts: np.ndarray, t: float) -> tuple:
    """Complex amplitude and per-axis logarithmic derivative of one packet."""
    b, _ = _spread_factor(t, state.mass, state.sigma0, state.hbar)
    denom = 4 * state.sigma0**2 * (1 + 1j * b * t)
    psi = np.ones(pts.shape[0], dtype=complex)
    dlog = np.empty(pts.shape, dtype=complex)
    for a in range(pts.shape[1]):
        xi = pts[:, a] - state.center[a]
        psi = psi * np.exp(-(xi**2) / denom)
        dlog[:, a] = -2 * xi / denom
    return psi, dlog


def analytic_state(spec: AnalyticState, grid: Grid, t: float) -> WaveFunction:
    """Sample a closed-form state on a grid at time t (grid-normalized)."""
    if not isinstance(spec, AnalyticState):
        raise ValueError(f"unknown analytic state {spec!r}")
    return spec.wavefunction(grid, t)


# ---------------------------------------------------------------------------
# binary snapshot format


def save_wavefunction(psi: WaveFunction, path) -> None:
    """Write a grid snapshot: magic 'WWF1', header, interleaved re/im float64."""
    grid = psi.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", grid.ndim))
        fh.write(struct.pack("<d", psi.t))
        for a in range(grid.ndim):
            fh.write(
                struct.pack(
                    "<QddB",
                    grid.counts[a],
                    grid.mins[a],
                    grid.spacings[a],
                    1 if grid.periodic[a] else 0,
                )
            )
        interleaved = np.empty(grid.shape + (2,), dtype="<f8")
        interleaved[..., 0] = psi.values.real
        interleaved[..., 1] = psi.values.imag
        fh.write(interleaved.tobytes(order="C"))


def load_wavefunction(path, metric: Metric | None = None) -> WaveFunction:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a WWF1 wavefunction file")
        (ndim,) = struct.unpack("<I", fh.read(4))
        (t,) = struct.unpack("<d", fh.read(8))
        mins, maxs, counts, periodic = [], [], [], []
        for _ in range(ndim):
            cnt, lo, h, per = struct.unpack("<QddB", fh.read(25))
            counts.append(int(cnt))
            mins.append(lo)
            periodic.append(bool(per))
            maxs.append(lo + h * (cnt if per else cnt - 1))
        grid = Grid(tuple(mins), tuple(maxs), tuple(counts), tuple(periodic))
        raw = np.frombuffer(fh.read(), dtype="<f8")
        if raw.size != 2 * grid.size:
            raise ValueError("wavefunction payload size mismatch")
        data = raw.reshape(grid.shape + (2,))
        values = data[..., 0] + 1j * data[..., 1]
    metric = metric or Metric(np.ones(ndim))
    return WaveFunction(grid, values, t, metric)
