import numpy as np
import pytest

from stackelberg_lab import NonContractionError, ValidationError
from stackelberg_lab.experiments import Problem
from stackelberg_lab.nash import nash_residual, solve_nash_fixed_point
from stackelberg_lab.noise_tree import AdaptedField
from stackelberg_lab.parabolic_core import backward_sweep
from stackelberg_lab.systems import (
    FollowerControls,
    LeaderControls,
    PicardSettings,
    Scenario,
    contraction_factor,
    evaluate_functionals,
    follower_adjoint_drift,
    game_duality_residual,
    leaders_from_adjoint,
    picard,
    psi_energy_ratio,
    solve_coupled_adjoint,
    solve_follower_adjoint,
    solve_free_state,
    solve_optimality_system,
    solve_state,
)


def _leaders(problem: Problem, rng) -> LeaderControls:
    return LeaderControls.random(rng, problem.lattice, problem.spec.layout.mask_g0) * 0.1


def _followers(problem: Problem, rng) -> FollowerControls:
    lattice, spec = problem.lattice, problem.spec
    tgrid = lattice.tgrid
    return FollowerControls(
        tuple(
            AdaptedField.random(rng, tgrid, 1, lattice.grid.n_x, tgrid.steps)
            .masked(mask)
            .time_scaled(spec.admissible.astype(float))
            for mask in spec.layout.masks_gi
        )
    )


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(a))


def _flat(followers: FollowerControls) -> np.ndarray:
    return np.concatenate([v.flatten() for v in followers.v])


class TestScenario:
    def test_observed_components(self):
        assert Scenario.FULL_OBSERVATION.observed.tolist() == [1.0, 1.0]
        assert Scenario.SECOND_COMPONENT.observed.tolist() == [0.0, 1.0]
        assert Scenario.FIRST_COMPONENT.observed.tolist() == [1.0, 0.0]

    def test_weighted_cost(self):
        assert Scenario.FULL_OBSERVATION.weighted_cost
        assert not Scenario.SECOND_COMPONENT.weighted_cost

    def test_unweighted_scenario_admits_every_time(self, tiny_problem: Problem):
        spec = tiny_problem.spec.replace(scenario=Scenario.SECOND_COMPONENT)
        assert spec.admissible.all()
        np.testing.assert_array_equal(spec.feedback_weight, 1.0)

    def test_weighted_scenario_excludes_start(self, tiny_problem: Problem):
        spec = tiny_problem.spec
        assert not spec.admissible[0]
        assert spec.feedback_weight[0] == 0.0


class TestGameSpec:
    def test_follower_count_mismatch(self, tiny_problem: Problem):
        with pytest.raises(ValidationError, match="follower count mismatch"):
            tiny_problem.spec.replace(alpha=(1.0,))

    def test_beta_below_one(self, tiny_problem: Problem):
        with pytest.raises(ValidationError, match="beta_i >= 1"):
            tiny_problem.spec.replace(beta=(0.5, 100.0))

    def test_non_positive_alpha(self, tiny_problem: Problem):
        with pytest.raises(ValidationError, match="alpha_i > 0"):
            tiny_problem.spec.replace(alpha=(0.0, 1.0))

    def test_threaded_followers_keep_order(self, tiny_problem: Problem):
        spec = tiny_problem.spec.replace(picard=PicardSettings(workers=2))
        assert spec.map_followers(lambda i: i * 10) == [0, 10]


class TestPicard:
    @pytest.fixture
    def metric(self) -> np.ndarray:
        return np.ones(3)

    def test_converges_to_fixed_point(self, metric: np.ndarray):
        x, report = picard(lambda x: 0.5 * x + 1.0, np.zeros(3), metric, PicardSettings(tol=1e-12), "affine")
        np.testing.assert_allclose(x, 2.0, rtol=1e-11)
        assert report.contraction == pytest.approx(0.5, rel=1e-3)

    def test_iteration_cap(self, metric: np.ndarray):
        settings = PicardSettings(tol=1e-12, max_iter=30)
        with pytest.raises(NonContractionError, match="increase beta_i"):
            picard(lambda x: 2.0 * x + 1.0, np.zeros(3), metric, settings, "expanding")

    def test_settings_validation(self):
        with pytest.raises(ValidationError):
            PicardSettings(relaxation=0.0)
        with pytest.raises(ValidationError):
            PicardSettings(tol=0.0)

    def test_contraction_factor(self):
        assert contraction_factor([1.0, 0.1, 0.01, 0.001]) == pytest.approx(0.1)
        assert contraction_factor([1.0]) == 0.0


class TestOptimalitySystem:
    def test_feedback_satisfies_first_order_conditions(self, scenario_problem: Problem, rng):
        leaders = _leaders(scenario_problem, rng)
        closed = solve_optimality_system(scenario_problem.spec, scenario_problem.y0, leaders)
        residual = nash_residual(scenario_problem.spec, scenario_problem.y0, leaders, closed.followers)
        assert max(residual.norms) <= 1e-8
        assert closed.report.iterations >= 1

    def test_followers_inactive_without_misfit(self, tiny_problem: Problem):
        spec = tiny_problem.spec.without_targets()
        y0 = np.zeros_like(tiny_problem.y0)
        closed = solve_optimality_system(spec, y0, LeaderControls.zeros(tiny_problem.lattice))
        for v in closed.followers.v:
            np.testing.assert_array_equal(v.flatten(), 0.0)

    def test_free_state_ignores_followers(self, tiny_problem: Problem, rng):
        leaders = _leaders(tiny_problem, rng)
        free = solve_free_state(tiny_problem.spec, tiny_problem.y0, leaders)
        adjoints = solve_follower_adjoint(tiny_problem.spec, free)
        assert len(adjoints) == tiny_problem.spec.followers
        np.testing.assert_array_equal(adjoints[0].terminal, 0.0)

    def test_functionals(self, tiny_problem: Problem):
        spec = tiny_problem.spec
        leaders = LeaderControls.zeros(tiny_problem.lattice)
        followers = FollowerControls.zeros(tiny_problem.lattice, spec.followers)
        state = solve_free_state(spec, tiny_problem.y0, leaders)
        values = evaluate_functionals(spec, leaders, followers, state)
        assert values.leader == 0.0
        assert all(j > 0 for j in values.followers)


class TestCoupledAdjoint:
    def test_game_duality(self, scenario_problem: Problem, rng):
        spec, y0 = scenario_problem.spec, scenario_problem.y0
        leaders = _leaders(scenario_problem, rng)
        closed = solve_optimality_system(spec, y0, leaders)
        coupled = solve_coupled_adjoint(spec, rng.standard_normal(scenario_problem.lattice.terminal_zeros().shape))
        assert game_duality_residual(spec, y0, leaders, closed.state, coupled) <= 1e-10

    def test_psi_starts_at_rest(self, tiny_problem: Problem, rng):
        coupled = solve_coupled_adjoint(
            tiny_problem.spec, rng.standard_normal(tiny_problem.lattice.terminal_zeros().shape)
        )
        for psi in coupled.psi:
            np.testing.assert_array_equal(psi.values[0], 0.0)

    def test_leaders_live_on_control_region(self, tiny_problem: Problem, rng):
        spec = tiny_problem.spec
        coupled = solve_coupled_adjoint(spec, rng.standard_normal(tiny_problem.lattice.terminal_zeros().shape))
        leaders = leaders_from_adjoint(spec, coupled)
        outside = ~spec.layout.mask_g0
        for arr in leaders.u1.values:
            np.testing.assert_array_equal(arr[..., outside], 0.0)

    def test_rejects_wrong_terminal_shape(self, tiny_problem: Problem):
        with pytest.raises(ValidationError, match="terminal datum"):
            solve_coupled_adjoint(tiny_problem.spec, np.zeros((1, 2, 5)))

    def test_psi_energy_ratio_is_finite(self, scenario_problem: Problem, rng):
        ratio = psi_energy_ratio(
            scenario_problem.spec, rng.standard_normal(scenario_problem.lattice.terminal_zeros().shape)
        )
        assert np.isfinite(ratio)
        assert ratio >= 0

    def test_decouples_for_huge_beta(self, tiny_problem: Problem, rng):
        spec = tiny_problem.spec.replace(beta=(1e12, 1e12))
        lattice = tiny_problem.lattice
        phi_t = rng.standard_normal(lattice.terminal_zeros().shape)
        coupled = solve_coupled_adjoint(spec, phi_t)
        phi_norm = lattice.norm(coupled.phi.path)
        for psi in coupled.psi:
            assert lattice.norm(psi.path()) <= 1e-10 * phi_norm
        decoupled = backward_sweep(phi_t, lattice, spec.coeffs, lattice.path_zeros(2))
        assert _relative(decoupled.path.flatten(), coupled.phi.path.flatten()) <= 1e-10
        assert _relative(decoupled.initial.ravel(), coupled.phi.initial.ravel()) <= 1e-10


class TestSuperposition:
    """Every solve is affine in its data: s(a + b) = s(a) + s(b) - s(0)."""

    @pytest.fixture
    def spec(self, tiny_problem: Problem):
        return tiny_problem.spec.replace(picard=PicardSettings(tol=1e-13))

    def test_state(self, tiny_problem: Problem, spec, rng):
        lattice = tiny_problem.lattice
        y0_a, y0_b = rng.standard_normal((2, 1, 2, lattice.grid.n_x))
        leaders_a, leaders_b = _leaders(tiny_problem, rng), _leaders(tiny_problem, rng)
        followers_a, followers_b = _followers(tiny_problem, rng), _followers(tiny_problem, rng)
        both = solve_state(spec, y0_a + y0_b, leaders_a + leaders_b, followers_a + followers_b)
        zero = solve_state(
            spec, np.zeros_like(y0_a), LeaderControls.zeros(lattice), FollowerControls.zeros(lattice, spec.followers)
        )
        parts = (
            solve_state(spec, y0_a, leaders_a, followers_a).flatten()
            + solve_state(spec, y0_b, leaders_b, followers_b).flatten()
            - zero.flatten()
        )
        assert _relative(both.flatten(), parts) <= 1e-11

    def test_coupled_adjoint(self, tiny_problem: Problem, spec, rng):
        shape = tiny_problem.lattice.terminal_zeros().shape
        phi_a, phi_b = rng.standard_normal(shape), rng.standard_normal(shape)
        both = solve_coupled_adjoint(spec, phi_a + phi_b)
        zero = solve_coupled_adjoint(spec, np.zeros(shape))
        a, b = solve_coupled_adjoint(spec, phi_a), solve_coupled_adjoint(spec, phi_b)
        parts = a.phi.path.flatten() + b.phi.path.flatten() - zero.phi.path.flatten()
        assert _relative(both.phi.path.flatten(), parts) <= 1e-11
        for i in range(spec.followers):
            psi_parts = a.psi[i].flatten() + b.psi[i].flatten() - zero.psi[i].flatten()
            assert _relative(both.psi[i].flatten(), psi_parts) <= 1e-11

    def test_nash_equilibrium(self, tiny_problem: Problem, spec, rng):
        lattice = tiny_problem.lattice
        y0_a, y0_b = rng.standard_normal((2, 1, 2, lattice.grid.n_x))
        leaders_a, leaders_b = _leaders(tiny_problem, rng), _leaders(tiny_problem, rng)

        def v_star(y0, leaders) -> np.ndarray:
            return _flat(solve_nash_fixed_point(spec, y0, leaders, 1e-12).v_star)

        both = v_star(y0_a + y0_b, leaders_a + leaders_b)
        parts = (
            v_star(y0_a, leaders_a)
            + v_star(y0_b, leaders_b)
            - v_star(np.zeros_like(y0_a), LeaderControls.zeros(lattice))
        )
        assert _relative(both, parts) <= 1e-10

    def test_nash_scales_with_data(self, tiny_problem: Problem, spec):
        c = 3.0
        zero = LeaderControls.zeros(tiny_problem.lattice)
        scaled = spec.replace(targets=tuple(t * c for t in spec.targets))
        base = _flat(solve_nash_fixed_point(spec, tiny_problem.y0, zero, 1e-12).v_star)
        tripled = _flat(solve_nash_fixed_point(scaled, tiny_problem.y0 * c, zero, 1e-12).v_star)
        assert _relative(tripled, base * c) <= 1e-10


class TestScenarioReduction:
    def test_second_component_drift_is_masked_full_drift(self, tiny_problem: Problem, rng):
        full = tiny_problem.spec
        second = full.replace(scenario=Scenario.SECOND_COMPONENT)
        state = solve_state(full, tiny_problem.y0, _leaders(tiny_problem, rng), _followers(tiny_problem, rng))
        for i in range(full.followers):
            masked = follower_adjoint_drift(full, i, state).component_scaled(np.array([0.0, 1.0]))
            reduced = follower_adjoint_drift(second, i, state)
            np.testing.assert_allclose(masked.flatten(), reduced.flatten(), rtol=0, atol=1e-13)
            np.testing.assert_array_equal(reduced.component(0).flatten(), 0.0)

    def test_second_component_adjoint_matches_masked_sweep(self, tiny_problem: Problem, rng):
        full = tiny_problem.spec
        second = full.replace(scenario=Scenario.SECOND_COMPONENT)
        lattice = tiny_problem.lattice
        state = solve_state(full, tiny_problem.y0, _leaders(tiny_problem, rng), _followers(tiny_problem, rng))
        adjoints = solve_follower_adjoint(second, state)
        for i, adjoint in enumerate(adjoints):
            drift = follower_adjoint_drift(full, i, state).component_scaled(np.array([0.0, 1.0]))
            masked = backward_sweep(lattice.terminal_zeros(2), lattice, full.coeffs, drift)
            np.testing.assert_allclose(adjoint.path.flatten(), masked.path.flatten(), rtol=0, atol=1e-13)
