import logging

import numpy as np
import pytest

from weylworlds.errors import NumericalError, StabilityError
from weylworlds.grids import (
    CONTRAVARIANT,
    Grid,
    Metric,
    ScalarField,
    VectorField,
    build_mass_metric,
    interior_mask,
    normalize_density,
)
from weylworlds.dynamics import (
    IntegratorConfig,
    PotentialSpec,
    continuity_residual,
    hamilton_jacobi_residual,
    quantum_potential,
    run_guided,
    run_self_contained,
    step_guided,
    step_self_contained,
    total_force,
    world_energy,
)
from weylworlds.ensemble import WorldEnsemble, sample_from_density
from weylworlds.oracle import AngularEigenstate3D, FreeGaussianState, HOGroundState

I1 = Metric(np.ones(1))
HBAR = 1.0


def line_grid(n=513, half=6.0):
    return Grid.regular(-half, half, n, False, ndim=1)


def ho_density(grid, mass=1.0, omega=1.0):
    (x,) = grid.meshgrid()
    mu = np.exp(-mass * omega * x**2 / HBAR)
    return normalize_density(ScalarField(grid, mu, name="mu"), Metric([mass]))


def region(grid, mu, floor=1e-6, depth=6):
    return interior_mask(grid, depth=depth) & (mu.values > floor * mu.values.max())


class TestQuantumPotential:
    def test_constant_density(self):
        grid = line_grid(64)
        mu = ScalarField(grid, np.ones(grid.shape))
        q = quantum_potential(mu, I1, HBAR)
        np.testing.assert_allclose(q.values, 0.0, atol=1e-12)

    def test_ho_ground_balances_potential(self):
        mass, omega = 1.0, 1.0
        grid = line_grid()
        g = Metric([mass])
        mu = ho_density(grid, mass, omega)
        q = quantum_potential(mu, g, HBAR)
        x = grid.axis(0)
        total = q.values + 0.5 * mass * omega**2 * x**2
        sel = region(grid, mu)
        expected = 0.5 * HBAR * omega
        err = np.abs(total[sel.ravel()] - expected).max()
        assert err < 1e-4 * expected

    def test_free_gaussian_closed_form(self):
        sigma = 1.3
        mass = 2.0
        grid = line_grid(513, 8.0)
        g = Metric([mass])
        (x,) = grid.meshgrid()
        mu = normalize_density(
            ScalarField(grid, np.exp(-(x**2) / (2 * sigma**2))), g
        )
        q = quantum_potential(mu, g, HBAR)
        expected = HBAR**2 / (4 * mass * sigma**2) * (1 - x**2 / (2 * sigma**2))
        sel = region(grid, mu)
        scale = np.abs(expected[sel]).max()
        assert np.abs(q.values - expected)[sel].max() < 1e-6 * scale

    def test_all_masked_rejected(self):
        grid = line_grid(64)
        mu = ScalarField(grid, np.zeros(grid.shape))
        with pytest.raises(ValueError):
            quantum_potential(mu, I1, HBAR)


class TestTotalForce:
    def test_classical_limit_harmonic(self):
        k_spring, mass = 2.0, 4.0
        grid = line_grid(129)
        g = Metric([mass])
        mu = normalize_density(ScalarField(grid, np.ones(grid.shape)), g)
        spec = PotentialSpec(
            potential=lambda q: 0.5 * k_spring * q[:, 0] ** 2, coupling=0.0
        )
        f = total_force(spec, mu, g)
        x = grid.axis(0)
        inner = interior_mask(grid).ravel()
        np.testing.assert_allclose(
            f.components[0][inner], -k_spring * x[inner] / mass, atol=1e-9
        )

    def test_stationary_state_force_balance(self):
        grid = line_grid()
        g = Metric([1.0])
        mu = ho_density(grid)
        spec = PotentialSpec(potential=lambda q: 0.5 * q[:, 0] ** 2, coupling=HBAR)
        f = total_force(spec, mu, g)
        sel = region(grid, mu, floor=1e-3, depth=7)
        assert np.abs(f.components[0][sel.ravel()]).max() < 1e-3

    def test_free_gaussian_force_points_outward(self):
        grid = line_grid()
        g = Metric([1.0])
        (x,) = grid.meshgrid()
        mu = normalize_density(ScalarField(grid, np.exp(-(x**2) / 2)), g)
        f = total_force(PotentialSpec(coupling=HBAR), mu, g)
        sel = (x > 0.5) & (x < 3.0)
        assert np.all(f.components[0][sel] > 0)
        sel = (x < -0.5) & (x > -3.0)
        assert np.all(f.components[0][sel] < 0)


def resting_worlds(positions):
    pos = np.asarray(positions, dtype=float).reshape(-1, 1)
    return WorldEnsemble(pos.copy(), pos, np.zeros_like(pos))


class TestSelfContained:
    def test_free_classical_straight_lines(self):
        pos = np.array([[0.0], [1.0]])
        vel = np.array([[0.5], [-0.25]])
        e = WorldEnsemble(pos.copy(), pos, vel)
        cfg = IntegratorConfig(dt=0.125, steps=8, grid=None,
                               density_source=None, stability_check=False)
        spec = PotentialSpec(coupling=0.0, grad=lambda q: np.zeros_like(q))
        out = run_self_contained(e, spec, cfg, I1)
        np.testing.assert_allclose(out.positions, pos + vel * 1.0, atol=1e-12)
        np.testing.assert_allclose(out.velocities, vel, atol=1e-12)

    def test_ho_ground_ensemble_stays_put(self):
        # stationary state with oracle density: drift under 1e-2 sigma per period
        mass = omega = 1.0
        sigma = np.sqrt(HBAR / (2 * mass * omega))
        grid = line_grid(257, 5.0)
        g = Metric([mass])
        state = HOGroundState(mass=mass, omega=omega)
        source = lambda t: state.density(grid, t)
        mu0 = source(0.0)
        e = sample_from_density(mu0, 200, seed=4, metric=g)
        spec = PotentialSpec(
            potential=lambda q: 0.5 * mass * omega**2 * q[:, 0] ** 2, coupling=HBAR
        )
        period = 2 * np.pi / omega
        dt = 4e-4
        cfg = IntegratorConfig(dt=dt, steps=int(period / dt), grid=grid,
                               refresh="exact-oracle", density_source=source)
        out = run_self_contained(e, spec, cfg, g)
        drift = np.abs(out.positions - e.positions).max()
        assert drift < 1e-2 * sigma

    def test_coupling_to_zero_recovers_classical(self):
        # coherent density kept at the physical width; trajectory deviation
        # from the classical solution shrinks with the coupling
        mass = omega = 1.0
        amp = 1.0
        sig2 = HBAR / (2 * mass * omega)
        grid = Grid.regular(-8.0, 8.0, 129, False, ndim=1)
        g = Metric([mass])

        def coherent_mu(t):
            (x,) = grid.meshgrid()
            c = amp * np.cos(omega * t)
            return normalize_density(
                ScalarField(grid, np.exp(-((x - c) ** 2) / (2 * sig2))), g
            )

        x0 = np.array([[0.6], [1.3]])
        period = 2 * np.pi / omega
        dt = 1e-3
        steps = int(period / dt)
        t_grid = dt * np.arange(1, steps + 1)
        classical = x0[:, 0][:, None] * np.cos(omega * t_grid)[None, :]
        devs = []
        for coupling in (1.0, 0.5, 0.25):
            e = WorldEnsemble(x0.copy(), x0.copy(), np.zeros_like(x0))
            traj = np.empty((2, steps))
            rows = {"k": 0}

            def record(k, ens, traj=traj):
                traj[:, k - 1] = ens.positions[:, 0]

            spec = PotentialSpec(
                potential=lambda q: 0.5 * mass * omega**2 * q[:, 0] ** 2,
                coupling=coupling,
            )
            cfg = IntegratorConfig(dt=dt, steps=steps, grid=grid,
                                   refresh="exact-oracle", density_source=coherent_mu)
            run_self_contained(e, spec, cfg, g, on_step=record)
            devs.append(np.abs(traj - classical).max())
        assert devs[0] > devs[1] > devs[2]
        assert devs[2] < 0.3 * np.abs(x0[:, 0] - 0).max()

    def test_stability_gate_rejects_large_dt(self):
        grid = line_grid(129)
        g = Metric([1.0])
        mu0 = ho_density(grid)
        e = sample_from_density(mu0, 50, seed=1, metric=g)
        spec = PotentialSpec(potential=lambda q: 0.5 * q[:, 0] ** 2, coupling=HBAR)
        cfg = IntegratorConfig(dt=0.5, steps=1, grid=grid,
                               refresh="exact-oracle", density_source=lambda t: mu0)
        with pytest.raises(StabilityError):
            run_self_contained(e, spec, cfg, g)

    def test_nonfinite_state_aborts(self):
        pos = np.array([[0.0], [1.0]])
        e = WorldEnsemble(pos.copy(), pos, np.zeros_like(pos))
        spec = PotentialSpec(coupling=0.0, grad=lambda q: np.full_like(q, -1e308))
        cfg = IntegratorConfig(dt=1.0, steps=3, stability_check=False)
        with pytest.raises(NumericalError):
            run_self_contained(e, spec, cfg, I1)

    def test_crossing_warning_logged(self, caplog):
        pos = np.array([[-0.5], [0.5]])
        vel = np.array([[2.0], [-2.0]])
        e = WorldEnsemble(pos.copy(), pos, vel)
        spec = PotentialSpec(coupling=0.0, grad=lambda q: np.zeros_like(q))
        cfg = IntegratorConfig(dt=0.25, steps=3, stability_check=False)
        with caplog.at_level(logging.WARNING, logger="weylworlds.dynamics"):
            run_self_contained(e, spec, cfg, I1)
        assert any("crossing" in rec.message for rec in caplog.records)


class TestGuided:
    def test_constant_phase_leaves_worlds_at_rest(self):
        grid = line_grid(64)
        S = ScalarField(grid, np.full(grid.shape, 1.23))
        e = resting_worlds([-1.0, 0.5, 2.0])
        out = run_guided(e, S, I1, dt=0.05, steps=10)
        np.testing.assert_allclose(out.positions, e.positions, atol=1e-12)

    def test_plane_wave_translates_uniformly(self):
        grid = line_grid(128, 8.0)
        mass, v = 1.5, 0.8
        g = Metric([mass])
        (x,) = grid.meshgrid()
        S = ScalarField(grid, mass * v * x)
        e = resting_worlds([-1.0, 0.0, 1.0])
        out = run_guided(e, S, g, dt=0.02, steps=100)
        np.testing.assert_allclose(
            out.positions, e.positions + v * 2.0, atol=1e-9
        )

    def test_vortex_worlds_circulate(self):
        grid = Grid.regular((-6, -6, -6), (6, 6, 6), (64, 64, 64), True)
        g = build_mass_metric([1.0, 1.0, 1.0], 1)
        state = AngularEigenstate3D(winding=1, envelope_sigma=1.2, envelope_sigma_z=1.2)
        pts = grid.meshgrid()
        p = VectorField(
            grid,
            tuple(
                state.phase_gradient(
                    np.stack([m.ravel() for m in pts], axis=1), 0.0
                )[:, a].reshape(grid.shape)
                for a in range(3)
            ),
        )
        radius = 1.5
        angles = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        pos = np.stack(
            [radius * np.cos(angles), radius * np.sin(angles), np.zeros(8)], axis=1
        )
        e = WorldEnsemble(pos.copy(), pos, np.zeros_like(pos))
        # one revolution at speed hbar/(m rho): period = 2 pi rho^2
        period = 2 * np.pi * radius**2
        steps = 400
        out = run_guided(e, p, g, dt=period / steps, steps=steps)
        radii = np.hypot(out.positions[:, 0], out.positions[:, 1])
        assert np.abs(radii - radius).max() < 0.01 * radius
        # back to the starting angle after one revolution
        dphi = np.arctan2(out.positions[:, 1], out.positions[:, 0]) - angles
        dphi = (dphi + np.pi) % (2 * np.pi) - np.pi
        assert np.abs(dphi).max() < 0.05


class TestResiduals:
    def test_static_density_zero_velocity(self):
        grid = line_grid(64)
        mu = ho_density(grid)
        vel = VectorField(grid, (np.zeros(grid.shape),), variance=CONTRAVARIANT)
        out = continuity_residual([mu, mu, mu], vel, I1, dt=0.1)
        assert out == 0.0

    def test_uniform_advection_residual_small(self):
        v0 = 0.7
        grid = line_grid(257, 8.0)
        state = FreeGaussianState(sigma0=1.0, drift=(v0,))

        def mu_at(t):
            return state.density(grid, t)

        dt = 1e-3
        # classical advection: the profile translates rigidly
        (x,) = grid.meshgrid()

        def translated(t):
            return normalize_density(
                ScalarField(grid, np.exp(-((x - v0 * t) ** 2) / 2)), I1
            )

        series = [translated(-dt), translated(0.0), translated(dt)]
        vel = VectorField(grid, (np.full(grid.shape, v0),), variance=CONTRAVARIANT)
        resid = continuity_residual(series, vel, I1, dt)
        h = grid.spacings[0]
        assert resid < 5 * (h**2 + dt**2)

    def test_advection_residual_convergence_order(self):
        v0 = 0.7
        resids = []
        for n, dt in ((129, 4e-2), (257, 2e-2), (513, 1e-2)):
            grid = Grid.regular(-8.0, 8.0, n, False, ndim=1)
            (x,) = grid.meshgrid()

            def translated(t):
                return normalize_density(
                    ScalarField(grid, np.exp(-((x - v0 * t) ** 2) / 2)), I1
                )

            series = [translated(-dt), translated(0.0), translated(dt)]
            vel = VectorField(grid, (np.full(grid.shape, v0),), variance=CONTRAVARIANT)
            resids.append(continuity_residual(series, vel, I1, dt))
        orders = [np.log2(resids[i] / resids[i + 1]) for i in range(2)]
        assert min(orders) >= 1.9

    def test_hj_residual_ground_state(self):
        grid = line_grid(513, 5.0)
        g = Metric([1.0])
        state = HOGroundState()
        mu = state.density(grid, 0.0)
        dt = 1e-3
        series = [state.phase_values(grid, t) for t in (-dt, 0.0, dt)]
        spec = PotentialSpec(potential=lambda q: 0.5 * q[:, 0] ** 2, coupling=HBAR)
        resid = hamilton_jacobi_residual(series, mu, spec, g, dt)
        energy = 0.5 * HBAR
        assert resid <= 1e-4 * energy

    def test_hj_residual_classical_free_particle(self):
        grid = line_grid(129, 8.0)
        mass, v0 = 1.0, 0.6
        g = Metric([mass])
        (x,) = grid.meshgrid()

        def s_at(t):
            return ScalarField(grid, mass * v0 * x - 0.5 * mass * v0**2 * t)

        dt = 0.01
        series = [s_at(-dt), s_at(0.0), s_at(dt)]
        mu = normalize_density(ScalarField(grid, np.exp(-(x**2) / 2)), g)
        spec = PotentialSpec(coupling=0.0)
        resid = hamilton_jacobi_residual(series, mu, spec, g, dt)
        assert resid < 1e-10

    def test_hj_residual_empty_region_rejected(self):
        grid = line_grid(64)
        g = Metric([1.0])
        mu = ho_density(grid)
        S = ScalarField(grid, np.zeros(grid.shape))
        spec = PotentialSpec(coupling=HBAR)
        with pytest.raises(ValueError):
            hamilton_jacobi_residual([S, S, S], mu, spec, g, 0.1, mu_floor=10.0)


class TestEnergyDiagnostic:
    def test_stationary_energy_constant(self):
        grid = line_grid(257, 5.0)
        g = Metric([1.0])
        state = HOGroundState()
        mu = state.density(grid, 0.0)
        e = sample_from_density(mu, 100, seed=9, metric=g)
        spec = PotentialSpec(potential=lambda q: 0.5 * q[:, 0] ** 2, coupling=HBAR)
        energies = world_energy(e, spec, g, mu)
        sel = np.abs(e.positions[:, 0]) < 3.0
        np.testing.assert_allclose(energies[sel], 0.5 * HBAR, atol=1e-3)
