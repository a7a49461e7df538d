"""Follower Nash equilibrium for fixed leader controls."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from stackelberg_lab import NonContractionError, ValidationError, logger
from stackelberg_lab.noise_tree import AdaptedField
from stackelberg_lab.parabolic_core import LocalizedSource, SourceSpec, backward_sweep, forward_sweep
from stackelberg_lab.systems import (
    FollowerControls,
    GameSpec,
    LeaderControls,
    contraction_factor,
    follower_cost,
    solve_follower_adjoint,
    solve_free_state,
    solve_optimality_system,
    solve_state,
)

DEFAULT_NASH_TOL = 1e-9


class NashMethod(Enum):
    FIXED_POINT = "fixed_point"
    ADJOINT_CHARACTERIZATION = "adjoint_characterization"
    DENSE_ORACLE = "dense_oracle"


@dataclass(frozen=True, eq=False)
class NashSolution:
    v_star: FollowerControls
    residuals: tuple[float, ...]
    method: NashMethod
    iterations: int
    contraction: float

    def as_row(self) -> dict[str, float | str | int]:
        return {
            "method": self.method.value,
            "iterations": self.iterations,
            "contraction": self.contraction,
            "max_residual": max(self.residuals),
        }


@dataclass(frozen=True, eq=False)
class NashResidual:
    """Per-follower Riesz representatives z₁ⁱχ_{G_i} + β_i ρ*² v_i and their scaled norms."""

    norms: tuple[float, ...]
    fields: tuple[AdaptedField, ...]
    scale: float


@dataclass(frozen=True)
class CoercivityEstimate:
    rho0: float
    lower_bound_estimate: float
    probes: tuple[float, ...]


@dataclass(frozen=True)
class CoercivityLadder:
    betas: tuple[float, ...]
    estimates: tuple[float, ...]
    slope: float

    def as_rows(self) -> list[dict[str, float]]:
        return [{"beta": b, "estimate": e} for b, e in zip(self.betas, self.estimates)]


def problem_scale(spec: GameSpec, y0: np.ndarray, leaders: LeaderControls) -> float:
    """1 + Σ‖y_d^i‖ + ‖y⁰‖ + ‖(u₁, u₂, u₃)‖."""
    lattice = spec.lattice
    y0 = np.asarray(y0, dtype=float).reshape(1, 2, lattice.grid.n_x)
    targets = sum(lattice.norm(target) for target in spec.targets)
    leader = float(np.sqrt(leaders.energy(lattice, spec.layout.mask_g0)))
    return 1.0 + targets + lattice.terminal_norm(y0) + leader


def _admissible_weights(spec: GameSpec) -> tuple[np.ndarray, np.ndarray]:
    admissible = spec.admissible
    penalty = np.where(admissible, spec.penalty_weight, 0.0)
    return admissible.astype(float), penalty


def residual_fields(
    spec: GameSpec, adjoint_paths: list[AdaptedField], followers: FollowerControls
) -> tuple[AdaptedField, ...]:
    indicator, penalty = _admissible_weights(spec)
    fields = []
    for i, path in enumerate(adjoint_paths):
        mask = spec.layout.masks_gi[i]
        gradient = path.component(0).masked(mask)
        cost = followers.v[i].masked(mask).time_scaled(penalty) * spec.beta[i]
        fields.append((gradient + cost).time_scaled(indicator))
    return tuple(fields)


def nash_residual(
    spec: GameSpec, y0: np.ndarray, leaders: LeaderControls, followers: FollowerControls
) -> NashResidual:
    """First-order residual of every follower computed through its adjoint."""
    state = solve_state(spec, y0, leaders, followers)
    adjoints = solve_follower_adjoint(spec, state)
    fields = residual_fields(spec, [adj.path for adj in adjoints], followers)
    scale = problem_scale(spec, y0, leaders)
    norms = tuple(spec.lattice.norm(f) / scale for f in fields)
    return NashResidual(norms=norms, fields=fields, scale=scale)


def lambda_apply(spec: GameSpec, i: int, vi: AdaptedField) -> AdaptedField:
    """Λ_i v: state driven from rest by v χ_{G_i} alone."""
    src = SourceSpec(localized=(LocalizedSource(spec.layout.masks_gi[i], vi),))
    return forward_sweep(np.zeros((1, 2, spec.lattice.grid.n_x)), spec.lattice, spec.coeffs, src)


def lambda_adjoint(spec: GameSpec, i: int, observation: AdaptedField) -> AdaptedField:
    """Λ_i* X = χ_{G_i} w₁ for the backward sweep with F = -X."""
    lattice = spec.lattice
    adjoint = backward_sweep(lattice.terminal_zeros(2), lattice, spec.coeffs, -observation)
    return adjoint.path.component(0).masked(spec.layout.masks_gi[i])


def _observation(spec: GameSpec, i: int, state: AdaptedField) -> AdaptedField:
    misfit = state.path() - spec.targets[i]
    return misfit.masked(spec.layout.mask_od).component_scaled(spec.observed) * spec.alpha[i]


def solve_nash_fixed_point(
    spec: GameSpec, y0: np.ndarray, leaders: LeaderControls, nash_tol: float = DEFAULT_NASH_TOL
) -> NashSolution:
    """Damped Jacobi iteration v_i <- -(α_i/(β_i ρ*²)) Λ_i*[(Σ_j Λ_j v_j + q - y_d^i) χ_{O_d}]."""
    settings = spec.picard
    q = solve_free_state(spec, y0, leaders)
    scale = problem_scale(spec, y0, leaders)
    feedback = spec.feedback_weight
    followers = FollowerControls.zeros(spec.lattice, spec.followers)
    omega = settings.relaxation
    halvings = increases = 0
    history: list[float] = []
    logger.info("Nash fixed point for %s followers, scale %.3e", spec.followers, scale)
    for iteration in range(1, settings.max_iter + 1):
        responses = spec.map_followers(lambda j: lambda_apply(spec, j, followers.v[j]))
        state = q
        for response in responses:
            state = state + response
        gradients = spec.map_followers(
            lambda i: lambda_adjoint(spec, i, _observation(spec, i, state))
        )
        fields = residual_fields(spec, gradients, followers)
        norms = tuple(spec.lattice.norm(f) / scale for f in fields)
        worst = max(norms)
        history.append(worst)
        logger.debug("Nash iteration %s max residual %.3e", iteration, worst)
        if worst <= nash_tol:
            return NashSolution(
                v_star=followers,
                residuals=norms,
                method=NashMethod.FIXED_POINT,
                iterations=iteration,
                contraction=contraction_factor(history),
            )
        increases = increases + 1 if len(history) > 1 and worst > history[-2] else 0
        if increases >= 3:
            if halvings >= settings.max_halvings:
                logger.error("Nash fixed point does not contract")
                raise NonContractionError(
                    "Nash fixed point does not contract: β_i ρ_0² - C is not positive, increase beta_i"
                )
            omega /= 2
            halvings += 1
            increases = 0
            logger.warning("Nash residual grew 3 times, relaxation halved to %s", omega)
        updates = tuple(
            g.time_scaled(feedback) * (-1.0 / spec.beta[i]) for i, g in enumerate(gradients)
        )
        followers = FollowerControls(
            tuple(v * (1.0 - omega) + u * omega for v, u in zip(followers.v, updates))
        )
    logger.error("Nash fixed point hit the iteration cap %s", settings.max_iter)
    raise NonContractionError(
        f"Nash fixed point did not reach {nash_tol} in {settings.max_iter} iterations; increase beta_i"
    )


def nash_from_adjoint(spec: GameSpec, y0: np.ndarray, leaders: LeaderControls) -> NashSolution:
    """Read v* off the feedback law of the optimality system."""
    closed = solve_optimality_system(spec, y0, leaders)
    residual = nash_residual(spec, y0, leaders, closed.followers)
    return NashSolution(
        v_star=closed.followers,
        residuals=residual.norms,
        method=NashMethod.ADJOINT_CHARACTERIZATION,
        iterations=closed.report.iterations,
        contraction=closed.report.contraction,
    )


def random_follower_direction(
    spec: GameSpec, i: int, rng: np.random.Generator
) -> AdaptedField:
    """Unit-norm random control on G_i at admissible times."""
    lattice = spec.lattice
    tgrid = lattice.tgrid
    w = AdaptedField.random(rng, tgrid, 1, lattice.grid.n_x, tgrid.steps)
    w = w.masked(spec.layout.masks_gi[i]).time_scaled(spec.admissible.astype(float))
    return w * (1.0 / lattice.norm(w))


def quadratic_form(spec: GameSpec, followers: FollowerControls) -> float:
    """⟨𝓛v, v⟩ = Σ_i β_i ‖ρ* v_i‖² + Σ_i α_i ⟨(Σ_j Λ_j v_j) χ_{O_d}, Λ_i v_i⟩."""
    lattice = spec.lattice
    responses = spec.map_followers(lambda j: lambda_apply(spec, j, followers.v[j]))
    total = lattice.state_zeros(2)
    for response in responses:
        total = total + response
    observed = total.path().masked(spec.layout.mask_od).component_scaled(spec.observed)
    value = 0.0
    for i in range(spec.followers):
        value += spec.beta[i] * lattice.inner(
            followers.v[i], followers.v[i], spec.layout.masks_gi[i], spec.penalty_weight
        )
        value += spec.alpha[i] * lattice.inner(observed, responses[i])
    return value


def _unit_directions(spec: GameSpec, n_probes: int, rng: np.random.Generator) -> list[FollowerControls]:
    if n_probes < 10:
        raise ValidationError(f"coercivity estimate needs at least 10 probes, got {n_probes}")
    scale = 1.0 / np.sqrt(spec.followers)
    return [
        FollowerControls(tuple(random_follower_direction(spec, i, rng) * scale for i in range(spec.followers)))
        for _ in range(n_probes)
    ]


def coercivity_estimate(
    spec: GameSpec, n_probes: int, rng: np.random.Generator
) -> CoercivityEstimate:
    """ρ₀ = min ρ* and the smallest Rayleigh quotient of 𝓛 over random unit probes."""
    values = [quadratic_form(spec, probe) for probe in _unit_directions(spec, n_probes, rng)]
    estimate = CoercivityEstimate(
        rho0=spec.weights.rho0, lower_bound_estimate=float(min(values)), probes=tuple(values)
    )
    logger.info("coercivity: rho0=%.6g, lower bound %.6g", estimate.rho0, estimate.lower_bound_estimate)
    return estimate


def coercivity_slope(
    spec: GameSpec, betas: list[float], n_probes: int, rng: np.random.Generator
) -> CoercivityLadder:
    """Coercivity estimate along a β ladder (β_i = β for every follower) and its log-log slope.

    The same random directions are reused on every rung. The slope tends to 1 once β ρ₀² dominates the
    observation part of 𝓛.
    """
    directions = _unit_directions(spec, n_probes, rng)
    estimates = []
    for beta in betas:
        rung = spec.replace(beta=(float(beta),) * spec.followers)
        estimates.append(min(quadratic_form(rung, v) for v in directions))
    estimates_arr = np.asarray(estimates)
    if np.all(estimates_arr > 0):
        slope = float(np.polyfit(np.log(betas), np.log(estimates_arr), 1)[0])
    else:
        slope = float("nan")
    logger.info("coercivity slope over beta %s: %.4f", list(betas), slope)
    return CoercivityLadder(betas=tuple(float(b) for b in betas), estimates=tuple(estimates), slope=slope)


def gradient_check(
    spec: GameSpec,
    y0: np.ndarray,
    leaders: LeaderControls,
    followers: FollowerControls,
    rng: np.random.Generator,
    n_directions: int = 5,
) -> float:
    """Worst relative gap between central differences of J_i and ⟨residual field, e⟩."""
    residual = nash_residual(spec, y0, leaders, followers)
    delta = 1e-5 * residual.scale
    worst = 0.0
    for i in range(spec.followers):
        for _ in range(n_directions):
            e = random_follower_direction(spec, i, rng)
            plus = followers.replaced(i, followers.v[i] + e * delta)
            minus = followers.replaced(i, followers.v[i] - e * delta)
            j_plus = follower_cost(spec, i, plus.v[i], solve_state(spec, y0, leaders, plus))
            j_minus = follower_cost(spec, i, minus.v[i], solve_state(spec, y0, leaders, minus))
            finite_difference = (j_plus - j_minus) / (2 * delta)
            adjoint = spec.lattice.inner(residual.fields[i], e)
            gap = abs(finite_difference - adjoint) / max(abs(adjoint), abs(finite_difference), 1e-300)
            worst = max(worst, gap)
    return worst


def deviation_margin(
    spec: GameSpec,
    y0: np.ndarray,
    leaders: LeaderControls,
    solution: NashSolution,
    rng: np.random.Generator,
    n_directions: int = 10,
    deltas: tuple[float, ...] = (1e-3, -1e-3),
) -> float:
    """min over unilateral deviations of J_i(v* + δw e_i) - J_i(v*); ≥ -1e-12 at an equilibrium."""
    v_star = solution.v_star
    base_state = solve_state(spec, y0, leaders, v_star)
    margin = np.inf
    for i in range(spec.followers):
        base = follower_cost(spec, i, v_star.v[i], base_state)
        for _ in range(n_directions):
            w = random_follower_direction(spec, i, rng)
            for delta in deltas:
                moved = v_star.replaced(i, v_star.v[i] + w * delta)
                cost = follower_cost(spec, i, moved.v[i], solve_state(spec, y0, leaders, moved))
                margin = min(margin, cost - base)
    return float(margin)
