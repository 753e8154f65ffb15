import numpy as np
import pytest

from weylworlds.errors import (
    NodeProximityError,
    NonQuantizedCirculationError,
)
from weylworlds.grids import (
    Grid,
    Metric,
    ScalarField,
    VectorField,
    build_mass_metric,
    gradient,
)
from weylworlds.oracle import AngularEigenstate3D, DoubleGaussianState, decompose
from weylworlds.topology import (
    Loop,
    circle_loop,
    decompose_momentum,
    detect_nodes,
    enclosed_nodes,
    loop_circulation,
    vortex_gradient_field,
    winding_number,
)

HBAR = 1.0
H_QUANTUM = 2 * np.pi * HBAR
I3 = build_mass_metric([1.0, 1.0, 1.0], 1)


def vortex_state(winding=1, sigma=1.2):
    return AngularEigenstate3D(winding=winding, envelope_sigma=sigma,
                               envelope_sigma_z=sigma)


def vortex_grid(n=64, half=6.0):
    return Grid.regular((-half,) * 3, (half,) * 3, (n,) * 3, True)


def vortex_fields(winding=1, n=64, half=6.0, sigma=1.2):
    grid = vortex_grid(n, half)
    psi = vortex_state(winding, sigma).wavefunction(grid, 0.0)
    return decompose(psi, hbar=HBAR)


class TestDetectNodes:
    def test_positive_density_has_no_nodes(self):
        grid = vortex_grid(16, 3.0)
        X, Y, Z = grid.meshgrid()
        mu = ScalarField(grid, np.exp(-(X**2 + Y**2 + Z**2) / 8))
        nodes = detect_nodes(mu, floor=1e-9)
        assert nodes.regions == ()

    def test_vortex_line_codimension_and_order(self):
        grid = Grid.regular((-4.5, -4.5, 0.0), (4.5, 4.5, 1.0), (384, 384, 8),
                            (False, False, True))
        mu = vortex_state(sigma=3.0).density(grid, 0.0)
        nodes = detect_nodes(mu, floor=2e-4)
        axis_regions = nodes.line_like()
        assert len(axis_regions) == 1
        region = axis_regions[0]
        assert region.codimension == 2
        assert abs(abs(region.direction[2]) - 1.0) < 1e-6
        assert region.order == pytest.approx(1.0, abs=0.1)

    def test_plane_node_flagged_codimension_one(self):
        grid = Grid.regular((-5, -3, -3), (5, 3, 3), (96, 32, 32), False)
        state = DoubleGaussianState(
            sigma0=1.5,
            center_a=(-1.5, 0.0, 0.0), center_b=(1.5, 0.0, 0.0), rel_phase=np.pi,
        )
        mu = state.density(grid, 0.0)
        nodes = detect_nodes(mu, floor=1e-6)
        codims = sorted(r.codimension for r in nodes.regions)
        assert codims == [1]
        assert nodes.line_like() == ()

    def test_fully_masked_rejected(self):
        grid = vortex_grid(16, 3.0)
        mu = ScalarField(grid, np.full(grid.shape, 1e-30))
        with pytest.raises(ValueError):
            detect_nodes(mu, floor=1e20)


class TestLoopCirculation:
    def test_exact_gradient_loops_to_zero(self):
        grid = Grid.regular((-3,) * 3, (3,) * 3, (48,) * 3, False)
        X, Y, Z = grid.meshgrid()
        f = ScalarField(grid, 0.4 * X**2 - 0.3 * X * Y + 0.2 * Z)
        p = gradient(f)
        loop = circle_loop((0.2, -0.1, 0.3), radius=1.1, n_points=200)
        circ = loop_circulation(p, loop)
        scale = max(np.abs(c).max() for c in p.components)
        assert abs(circ) < 1e-6 * scale * loop.length

    def test_vortex_circulation_quantum(self):
        _, p = vortex_fields(winding=1)
        loop = circle_loop((0, 0, 0), radius=1.5, n_points=256)
        circ = loop_circulation(p, loop)
        assert circ == pytest.approx(H_QUANTUM, rel=1e-3)

    def test_double_traversal_doubles(self):
        _, p = vortex_fields(winding=1)
        once = circle_loop((0, 0, 0), radius=1.4, n_points=128)
        twice_pts = np.concatenate([once.points[:-1], once.points], axis=0)
        twice = Loop(twice_pts)
        assert loop_circulation(p, twice) == pytest.approx(
            2 * loop_circulation(p, once), rel=1e-12
        )

    def test_masked_loop_rejected(self):
        mu, p = vortex_fields(winding=1)
        nodes = detect_nodes(mu, floor=5e-2)
        assert nodes.mask.any()
        masked_p = VectorField(p.grid, p.components, mask=nodes.mask)
        tiny = circle_loop((0, 0, 0), radius=0.05, n_points=64)
        with pytest.raises(NodeProximityError):
            loop_circulation(masked_p, tiny)

    def test_open_polyline_rejected(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.5]])
        with pytest.raises(ValueError):
            Loop(pts)


class TestWindingNumber:
    def test_zero(self):
        assert winding_number(0.0, H_QUANTUM) == (0, 0.0)

    def test_single_quantum(self):
        z, defect = winding_number(H_QUANTUM, H_QUANTUM)
        assert z == 1 and defect == 0.0

    def test_two_quanta_from_oracle(self):
        _, p = vortex_fields(winding=2)
        circ = loop_circulation(p, circle_loop((0, 0, 0), 1.6, 256))
        z, defect = winding_number(circ, H_QUANTUM)
        assert z == 2
        assert defect < 1e-3

    def test_units_scale_out(self):
        circ = 3 * H_QUANTUM + 0.01
        z1, d1 = winding_number(circ, H_QUANTUM)
        z2, d2 = winding_number(10 * circ, 10 * H_QUANTUM)
        assert z1 == z2
        assert d1 == pytest.approx(d2, rel=1e-12)

    def test_far_from_integer_rejected(self):
        with pytest.raises(NonQuantizedCirculationError):
            winding_number(0.5 * H_QUANTUM, H_QUANTUM)


class TestEnclosedNodes:
    def test_encircling_and_offset_loops(self):
        mu, _ = vortex_fields(winding=1)
        nodes = detect_nodes(mu, floor=5e-2)
        assert len(nodes.line_like()) == 1
        idx = nodes.line_like()[0].index
        around = circle_loop((0, 0, 0), radius=1.5, n_points=64)
        beside = circle_loop((3.0, 3.0, 0), radius=0.5, n_points=64)
        assert enclosed_nodes(around, nodes) == (idx,)
        assert enclosed_nodes(beside, nodes) == ()


class TestDecomposeMomentum:
    def test_pure_gradient_recovers_scalar(self):
        grid = Grid.regular((-3,) * 3, (3,) * 3, (32,) * 3, False)
        X, Y, Z = grid.meshgrid()
        f_vals = 0.5 * X**2 + 0.3 * Y - 0.2 * Z**2
        p = gradient(ScalarField(grid, f_vals))
        # a small fake node set with no masked cells
        mu = ScalarField(grid, np.exp(-(X**2 + Y**2 + Z**2) / 8))
        nodes = detect_nodes(mu, floor=1e-12)
        out = decompose_momentum(p, I3, nodes, H_QUANTUM)
        assert out.windings == {}
        inner = (np.abs(X) < 2) & (np.abs(Y) < 2) & (np.abs(Z) < 2)
        centered = f_vals - f_vals[inner].mean()
        recovered = out.u.values - out.u.values[inner].mean()
        scale = np.abs(centered[inner]).max()
        assert np.abs(recovered - centered)[inner].max() < 1e-2 * scale

    def test_vortex_state_winding_one(self):
        mu, p = vortex_fields(winding=1, n=64, half=5.0, sigma=1.0)
        nodes = detect_nodes(mu, floor=5e-2)
        p_masked = VectorField(p.grid, p.components, mask=nodes.mask)
        out = decompose_momentum(p_masked, I3, nodes, H_QUANTUM)
        line = nodes.line_like()[0]
        assert out.windings[line.index] == 1
        assert out.max_defect < 1e-2
        grad_u = gradient(out.u)
        live = out.u.valid & (mu.values > 1e-3 * mu.values.max())
        p_scale = np.sqrt(max((c**2)[live].max() for c in p.components))
        for c in grad_u.components:
            assert np.abs(c[live]).max() < 0.05 * p_scale

    def test_disconnected_domain_rejected(self):
        grid = Grid.regular(( -3,) * 3, (3,) * 3, (24,) * 3, False)
        X, Y, Z = grid.meshgrid()
        p = VectorField(grid, (np.zeros_like(X),) * 3)
        # two fat slabs of masked cells split the domain
        mu_vals = np.ones(grid.shape)
        mu_vals[:, :, 8:10] = 0.0
        mu = ScalarField(grid, mu_vals)
        nodes = detect_nodes(mu, floor=1e-6)
        with pytest.raises(ValueError):
            decompose_momentum(p, I3, nodes, H_QUANTUM)


class TestVortexModelField:
    def test_unit_circulation(self):
        grid = vortex_grid(48, 4.0)
        v = vortex_gradient_field(grid, (0, 0, 0), (0, 0, 1))
        loop = circle_loop((0, 0, 0), radius=2.0, n_points=256)
        assert loop_circulation(v, loop) == pytest.approx(2 * np.pi, rel=1e-3)
