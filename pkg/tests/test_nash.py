import numpy as np
import pytest

from stackelberg_lab import NonContractionError, ValidationError
from stackelberg_lab.experiments import Problem
from stackelberg_lab.nash import (
    NashMethod,
    coercivity_estimate,
    coercivity_slope,
    deviation_margin,
    gradient_check,
    lambda_adjoint,
    lambda_apply,
    nash_from_adjoint,
    nash_residual,
    quadratic_form,
    random_follower_direction,
    solve_nash_fixed_point,
)
from stackelberg_lab.noise_tree import AdaptedField
from stackelberg_lab.systems import FollowerControls, LeaderControls, PicardSettings


@pytest.fixture
def leaders(tiny_problem: Problem, rng) -> LeaderControls:
    return LeaderControls.random(rng, tiny_problem.lattice, tiny_problem.spec.layout.mask_g0) * 0.1


def _admissible_followers(problem: Problem, rng) -> FollowerControls:
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


def test_methods_agree(scenario_problem: Problem, rng):
    spec, y0 = scenario_problem.spec, scenario_problem.y0
    leaders = LeaderControls.random(rng, scenario_problem.lattice, spec.layout.mask_g0) * 0.1
    fixed = solve_nash_fixed_point(spec, y0, leaders, 1e-10)
    adjoint = nash_from_adjoint(spec, y0, leaders)
    assert fixed.method is NashMethod.FIXED_POINT
    assert adjoint.method is NashMethod.ADJOINT_CHARACTERIZATION
    assert max(fixed.residuals) <= 1e-10
    scale = 1.0 + np.sqrt(sum(scenario_problem.lattice.inner(v, v) for v in fixed.v_star.v))
    assert fixed.v_star.distance(adjoint.v_star, scenario_problem.lattice) / scale <= 1e-8


def test_as_row(tiny_problem: Problem, leaders: LeaderControls):
    row = solve_nash_fixed_point(tiny_problem.spec, tiny_problem.y0, leaders).as_row()
    assert row["method"] == "fixed_point"
    assert set(row) == {"method", "iterations", "contraction", "max_residual"}


def test_zero_followers_are_not_an_equilibrium(tiny_problem: Problem, leaders: LeaderControls):
    zero = FollowerControls.zeros(tiny_problem.lattice, tiny_problem.spec.followers)
    residual = nash_residual(tiny_problem.spec, tiny_problem.y0, leaders, zero)
    assert max(residual.norms) > 1e-6
    assert residual.scale > 1.0


def test_iteration_cap_raises(tiny_problem: Problem, leaders: LeaderControls):
    spec = tiny_problem.spec.replace(picard=PicardSettings(max_iter=1))
    with pytest.raises(NonContractionError, match="increase beta_i"):
        solve_nash_fixed_point(spec, tiny_problem.y0, leaders)


def test_lambda_adjoint_is_transpose(tiny_problem: Problem, rng):
    spec, lattice = tiny_problem.spec, tiny_problem.lattice
    tgrid = lattice.tgrid
    v = random_follower_direction(spec, 0, rng)
    observation = AdaptedField.random(rng, tgrid, 2, lattice.grid.n_x, tgrid.steps)
    lhs = lattice.inner(lambda_apply(spec, 0, v).path(), observation)
    rhs = lattice.inner(v, lambda_adjoint(spec, 0, observation))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)


def test_random_direction_is_unit_and_admissible(tiny_problem: Problem, rng):
    spec = tiny_problem.spec
    direction = random_follower_direction(spec, 1, rng)
    assert tiny_problem.lattice.norm(direction) == pytest.approx(1.0)
    np.testing.assert_array_equal(direction.values[0], 0.0)
    np.testing.assert_array_equal(direction.values[1][..., ~spec.layout.masks_gi[1]], 0.0)


class TestCoercivity:
    def test_positive(self, tiny_problem: Problem, rng):
        estimate = coercivity_estimate(tiny_problem.spec, 10, rng)
        assert estimate.lower_bound_estimate > 0
        assert len(estimate.probes) == 10
        assert estimate.rho0 == tiny_problem.spec.weights.rho0

    def test_grows_with_beta(self, tiny_problem: Problem):
        spec = tiny_problem.spec
        low = coercivity_estimate(spec, 10, np.random.default_rng(7))
        high = coercivity_estimate(spec.replace(beta=(200.0, 200.0)), 10, np.random.default_rng(7))
        assert high.lower_bound_estimate > low.lower_bound_estimate

    def test_quadratic_form_scales(self, tiny_problem: Problem, rng):
        followers = _admissible_followers(tiny_problem, rng)
        value = quadratic_form(tiny_problem.spec, followers)
        assert quadratic_form(tiny_problem.spec, followers * 3.0) == pytest.approx(9.0 * value)

    def test_linear_in_beta(self, tiny_problem: Problem, rng):
        ladder = coercivity_slope(tiny_problem.spec, [1e2, 1e3, 1e4], 10, rng)
        assert ladder.betas == (1e2, 1e3, 1e4)
        assert all(b > a for a, b in zip(ladder.estimates, ladder.estimates[1:]))
        assert abs(ladder.slope - 1.0) <= 0.1
        assert [row["beta"] for row in ladder.as_rows()] == [1e2, 1e3, 1e4]

    def test_ladder_leaves_spec_untouched(self, tiny_problem: Problem, rng):
        spec = tiny_problem.spec
        coercivity_slope(spec, [1e2, 1e3], 10, rng)
        assert spec.beta == (100.0, 100.0)

    def test_needs_ten_probes(self, tiny_problem: Problem, rng):
        with pytest.raises(ValidationError, match="10 probes"):
            coercivity_estimate(tiny_problem.spec, 5, rng)


def test_gradient_matches_finite_differences(tiny_problem: Problem, leaders: LeaderControls, rng):
    followers = _admissible_followers(tiny_problem, rng)
    assert gradient_check(tiny_problem.spec, tiny_problem.y0, leaders, followers, rng) <= 1e-6


def test_no_profitable_unilateral_deviation(tiny_problem: Problem, leaders: LeaderControls, rng):
    solution = solve_nash_fixed_point(tiny_problem.spec, tiny_problem.y0, leaders)
    assert deviation_margin(tiny_problem.spec, tiny_problem.y0, leaders, solution, rng) >= -1e-12
