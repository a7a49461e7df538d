import numpy as np
import pytest

from stackelberg_lab import ValidationError
from stackelberg_lab.lattice_weights import SpatialGrid, TimeGrid
from stackelberg_lab.noise_tree import AdaptedField
from stackelberg_lab.parabolic_core import (
    CouplingField,
    DiffusionStencil,
    Lattice,
    LocalizedSource,
    SourceSpec,
    adjoint_transposition_error,
    backward_sweep,
    duality_residual,
    energy_bound_ratio,
    forward_step,
    forward_sweep,
)


def _heat_error(n_x: int, horizon: float, substeps: int, reference) -> float:
    grid = SpatialGrid(1.0, n_x)
    tgrid = TimeGrid(horizon, 1, substeps)
    lattice = Lattice.build(grid, tgrid)
    y0 = np.stack([grid.mode(1), np.zeros(n_x)])
    state = forward_sweep(y0, lattice, CouplingField.zero(tgrid, grid))
    expected = reference(tgrid, grid) * grid.mode(1)
    return float(np.max(np.abs(state.terminal[0, 0] - expected)))


def _order(errors: list[float]) -> float:
    return float(np.mean(np.log2(np.array(errors[:-1]) / np.array(errors[1:]))))


class TestHeatConvergence:
    def test_first_order_in_time(self):
        errors = [
            _heat_error(127, 0.1, substeps, lambda tgrid, grid: np.exp(-np.pi**2 * tgrid.horizon))
            for substeps in (8, 16, 32)
        ]
        assert _order(errors) == pytest.approx(1.0, abs=0.3)

    def test_second_order_in_space(self):
        def time_stepped(tgrid, grid):
            return (1.0 + tgrid.dt * np.pi**2) ** -tgrid.steps

        errors = [_heat_error(n_x, 0.1, 4, time_stepped) for n_x in (7, 15, 31)]
        assert _order(errors) == pytest.approx(2.0, abs=0.3)


class TestDiffusionStencil:
    def test_solve_inverts_implicit_matrix(self, rng):
        stencil = DiffusionStencil.build(SpatialGrid(1.0, 9), 0.01)
        rhs = rng.standard_normal((3, 9))
        np.testing.assert_allclose(stencil.solve(rhs) @ stencil.implicit_dense().T, rhs, atol=1e-12)
        assert stencil.factorization_residual() <= 1e-12

    def test_laplacian_eigenvalue(self):
        grid = SpatialGrid(1.0, 9)
        stencil = DiffusionStencil.build(grid, 0.01)
        np.testing.assert_allclose(
            -stencil.laplacian_dense() @ grid.mode(2),
            grid.laplacian_eigenvalue(2) * grid.mode(2),
            atol=1e-10,
        )


class TestCouplingField:
    def test_sign_detection(self):
        grid, tgrid = SpatialGrid(1.0, 5), TimeGrid(1.0, 2, 1)
        mask = grid.interval_mask(0.45, 0.55)
        assert CouplingField.constant(0, 0, 1.0, 0, tgrid, grid).check_sign(mask, 0.5) == 1
        assert CouplingField.constant(0, 0, -1.0, 0, tgrid, grid).check_sign(mask, 0.5) == -1
        with pytest.raises(ValidationError, match="a_21"):
            CouplingField.constant(0, 0, 0.1, 0, tgrid, grid).check_sign(mask, 0.5)

    def test_stability_bound(self):
        grid, tgrid = SpatialGrid(1.0, 5), TimeGrid(1.0, 2, 1)
        coeffs = CouplingField.constant(1.5, 1.0, 0, 0, tgrid, grid)
        assert coeffs.sup_norm == 2.5
        with pytest.raises(ValidationError, match="stability"):
            forward_sweep(np.zeros((2, 5)), Lattice.build(grid, tgrid), coeffs)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValidationError):
            CouplingField(np.zeros((2, 2, 3, 5)))


class TestSweeps:
    def test_duality_identity(self, small_lattice: Lattice, random_coupling: CouplingField, rng):
        tgrid, n_x = small_lattice.tgrid, small_lattice.grid.n_x
        for _ in range(5):
            src = SourceSpec(
                drift=AdaptedField.random(rng, tgrid, 2, n_x, tgrid.steps),
                noise=AdaptedField.random(rng, tgrid, 2, n_x, tgrid.steps),
            )
            drift = AdaptedField.random(rng, tgrid, 2, n_x, tgrid.steps)
            state = forward_sweep(rng.standard_normal((2, n_x)), small_lattice, random_coupling, src)
            adjoint = backward_sweep(
                rng.standard_normal(small_lattice.terminal_zeros().shape), small_lattice, random_coupling, drift
            )
            assert duality_residual(small_lattice, state, adjoint, src, drift) <= 1e-10

    def test_transposition(self, small_lattice: Lattice, random_coupling: CouplingField, rng):
        assert adjoint_transposition_error(small_lattice, random_coupling, rng) <= 1e-12

    def test_martingale_held_over_substeps(self, small_lattice: Lattice, random_coupling: CouplingField, rng):
        terminal = rng.standard_normal(small_lattice.terminal_zeros().shape)
        adjoint = backward_sweep(terminal, small_lattice, random_coupling)
        # R = 2: steps 2m and 2m+1 share one noise interval
        for m in range(0, small_lattice.tgrid.steps, 2):
            np.testing.assert_array_equal(adjoint.martingale.values[m], adjoint.martingale.values[m + 1])

    def test_deterministic_data_stays_deterministic(self, small_lattice: Lattice):
        grid, tgrid = small_lattice.grid, small_lattice.tgrid
        state = forward_sweep(
            np.stack([grid.mode(1), grid.mode(2)]), small_lattice, CouplingField.constant(0, 0, 1, 0, tgrid, grid)
        )
        leaves = state.terminal
        np.testing.assert_allclose(leaves - leaves[0], 0.0, atol=1e-15)

    def test_localized_source_matches_masked_drift(self, small_lattice: Lattice, random_coupling, rng):
        tgrid, grid = small_lattice.tgrid, small_lattice.grid
        mask = grid.interval_mask(0.3, 0.7)
        control = AdaptedField.random(rng, tgrid, 1, grid.n_x, tgrid.steps)
        localized = SourceSpec(localized=(LocalizedSource(mask, control, gain=2.0),))
        drift = AdaptedField.stack_components([control.masked(mask) * 2.0, control * 0.0])
        y0 = np.zeros((2, grid.n_x))
        np.testing.assert_allclose(
            forward_sweep(y0, small_lattice, random_coupling, localized).flatten(),
            forward_sweep(y0, small_lattice, random_coupling, SourceSpec(drift=drift)).flatten(),
            atol=1e-14,
        )

    def test_step_rejects_wrong_level(self, small_lattice: Lattice, random_coupling):
        with pytest.raises(ValidationError, match="level"):
            forward_step(np.zeros((2, 2, 7)), small_lattice, random_coupling, SourceSpec(), 0)

    def test_heat_energy_ratio_is_one(self, small_lattice: Lattice):
        grid, tgrid = small_lattice.grid, small_lattice.tgrid
        y0 = np.stack([grid.mode(1), grid.mode(3)])
        ratio = energy_bound_ratio(small_lattice, CouplingField.zero(tgrid, grid), y0)
        assert ratio == pytest.approx(1.0)
