import numpy as np
import pytest

from stackelberg_lab import CGStagnationError, ObservabilityError, ValidationError
from stackelberg_lab.experiments import Problem, build_problem
from stackelberg_lab.hum_leader import (
    HumParams,
    ObservabilityMode,
    conjugate_gradient,
    dense_observability_supported,
    epsilon_sweep,
    gramian_apply,
    hierarchy_residual,
    observability_rayleigh,
    observability_ratio,
    solve_leader,
)
from stackelberg_lab.systems import LeaderControls, solve_optimality_system
from stackelberg_lab.utils.config_utils import load_config


def _spd(rng, n: int = 12) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(np.linspace(0.1, 10.0, n)) @ q.T


class TestHumParams:
    @pytest.mark.parametrize("epsilon", [0.0, -1e-3])
    def test_epsilon_positive(self, epsilon: float):
        with pytest.raises(ValidationError, match="epsilon"):
            HumParams(epsilon)

    def test_cg_tolerance_range(self):
        with pytest.raises(ValidationError, match="cg_tol"):
            HumParams(1e-3, cg_tol=0.1)


class TestConjugateGradient:
    def test_solves_regularized_system(self, rng):
        g = _spd(rng)
        b = rng.standard_normal(12)
        x, iterations = conjugate_gradient(lambda p: g @ p, b, np.dot, 0.5, 1e-12, 100)
        np.testing.assert_allclose(x, np.linalg.solve(g + 0.5 * np.eye(12), b), rtol=1e-9)
        assert 1 <= iterations <= 100

    def test_zero_rhs(self, rng):
        x, iterations = conjugate_gradient(lambda p: p, np.zeros(4), np.dot, 1.0, 1e-8, 10)
        assert iterations == 0
        np.testing.assert_array_equal(x, 0.0)

    def test_iteration_cap(self, rng):
        g = _spd(rng)
        with pytest.raises(CGStagnationError, match="did not reach"):
            conjugate_gradient(lambda p: g @ p, rng.standard_normal(12), np.dot, 1e-6, 1e-14, 2)


class TestGramian:
    def test_symmetric_positive(self, tiny_problem: Problem, rng):
        spec, lattice = tiny_problem.spec, tiny_problem.lattice
        shape = lattice.terminal_zeros().shape
        phi, psi = rng.standard_normal(shape), rng.standard_normal(shape)
        g_phi, g_psi = gramian_apply(spec, phi), gramian_apply(spec, psi)
        assert lattice.terminal_inner(g_phi, psi) == pytest.approx(lattice.terminal_inner(phi, g_psi), rel=1e-8)
        assert lattice.terminal_inner(g_phi, phi) > 0

    def test_zero_datum(self, tiny_problem: Problem):
        zero = tiny_problem.lattice.terminal_zeros()
        np.testing.assert_array_equal(gramian_apply(tiny_problem.spec, zero), 0.0)


class TestSolveLeader:
    @pytest.fixture
    def params(self, tiny_problem: Problem) -> HumParams:
        config = tiny_problem.config
        return HumParams(config.epsilon, cg_tol=config.cg_tol, cg_max_iter=config.cg_max_iter)

    def test_identity_and_hierarchy(self, tiny_problem: Problem, params: HumParams):
        spec, y0 = tiny_problem.spec, tiny_problem.y0
        solution = solve_leader(spec, y0, params)
        assert solution.identity_residual <= 10 * params.cg_tol * solution.scale
        assert hierarchy_residual(spec, y0, solution) <= 1e-8
        u1, u2, u3 = solution.control_norms
        assert solution.j_value == pytest.approx(0.5 * (u1**2 + u2**2 + u3**2))

    def test_drives_terminal_state_down(self, tiny_problem: Problem, params: HumParams):
        spec, y0 = tiny_problem.spec, tiny_problem.y0
        free = solve_optimality_system(spec, y0, LeaderControls.zeros(tiny_problem.lattice))
        solution = solve_leader(spec, y0, params)
        assert solution.terminal_norm < tiny_problem.lattice.terminal_norm(free.state.terminal)
        assert solution.epsilon == params.epsilon

    def test_sweep_decreases_terminal_norm(self, tiny_problem: Problem, params: HumParams):
        table = epsilon_sweep(tiny_problem.spec, tiny_problem.y0, [1e-2, 1e-3, 1e-4], params)
        norms = [row.terminal_norm for row in table.rows]
        assert all(b < a for a, b in zip(norms, norms[1:]))
        assert table.slope > 0
        assert table.control_norm_ratio >= 1.0
        assert table.control_bound_ratio > 0

    def test_sweep_slope_clears_decay_gate(self, tiny_problem: Problem, params: HumParams):
        table = epsilon_sweep(tiny_problem.spec, tiny_problem.y0, [1e-2, 1e-3, 1e-4], params)
        assert table.slope >= 0.45
        assert np.isfinite(table.control_bound_ratio)

    def test_weak_coupling_stalls_decay(self, tiny_config, params: HumParams):
        # the second mean is reached only through a21
        problem = build_problem(tiny_config.replace(a21=1.0))
        table = epsilon_sweep(problem.spec, problem.y0, [1e-2, 1e-3, 1e-4], params)
        assert 0 < table.slope < 0.45

    @pytest.mark.parametrize("ladder", [[1e-2, 1e-3], [1e-2, 1e-2, 1e-3], [1e-4, 1e-3, 1e-2]])
    def test_sweep_rejects_bad_ladder(self, tiny_problem: Problem, params: HumParams, ladder):
        with pytest.raises(ValidationError, match="strictly decreasing"):
            epsilon_sweep(tiny_problem.spec, tiny_problem.y0, ladder, params)


class TestObservability:
    def test_zero_probe_rejected(self, tiny_problem: Problem):
        with pytest.raises(ObservabilityError, match="zero probe"):
            observability_ratio(tiny_problem.spec, tiny_problem.lattice.terminal_zeros())

    def test_sampled_ratios_finite(self, tiny_problem: Problem, rng):
        report = observability_rayleigh(tiny_problem.spec, 5, ObservabilityMode.SAMPLED, rng)
        assert report.finite
        assert len(report.ratios) == 5
        assert report.min_gramian_eig_estimate is None

    def test_dense_gramian_positive(self, scenario_problem: Problem, rng):
        report = observability_rayleigh(scenario_problem.spec, 0, ObservabilityMode.DENSE, rng)
        assert report.min_gramian_eig_estimate > 0
        assert report.finite

    def test_dense_mode_needs_small_lattice(self, desk_ini: str, rng):
        problem = build_problem(load_config(desk_ini))
        assert not dense_observability_supported(problem.lattice)
        with pytest.raises(ValidationError, match="dense observability"):
            observability_rayleigh(problem.spec, 0, ObservabilityMode.DENSE, rng)

    def test_tiny_lattice_supports_dense_mode(self, tiny_problem: Problem):
        assert dense_observability_supported(tiny_problem.lattice)
