"""State, follower adjoint, coupled adjoint and optimality systems of the game.

Sign convention for backward drift sources F: dz + Δz dt = (-Aᵀz + F) dt + Z dW.
The follower adjoint source is F = -α_i (y - y_d^i) χ_{O_d} restricted to the observed
components of the scenario; the coupled adjoint φ carries F = Σ α_i ψ^i χ_{O_d}.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import TypeVar

import numpy as np

from stackelberg_lab import NonContractionError, ValidationError, logger
from stackelberg_lab.lattice_weights import SubdomainLayout, WeightTables
from stackelberg_lab.noise_tree import AdaptedField, path_metric
from stackelberg_lab.parabolic_core import (
    BackwardSolution,
    CouplingField,
    Lattice,
    LocalizedSource,
    SourceSpec,
    backward_sweep,
    forward_sweep,
)

R = TypeVar("R")


class Scenario(Enum):
    """Which state components the followers observe and how their control is priced."""

    FULL_OBSERVATION = "full"
    SECOND_COMPONENT = "second"
    FIRST_COMPONENT = "first"

    @property
    def observed(self) -> np.ndarray:
        match self:
            case Scenario.FULL_OBSERVATION:
                return np.array([1.0, 1.0])
            case Scenario.SECOND_COMPONENT:
                return np.array([0.0, 1.0])
            case Scenario.FIRST_COMPONENT:
                return np.array([1.0, 0.0])

    @property
    def weighted_cost(self) -> bool:
        """True when the follower cost carries ρ*² (and the feedback ρ*⁻²)."""
        return self is not Scenario.SECOND_COMPONENT


@dataclass(frozen=True)
class PicardSettings:
    tol: float = 1e-11
    max_iter: int = 200
    relaxation: float = 1.0
    max_halvings: int = 4
    workers: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.relaxation <= 1:
            raise ValidationError(f"relaxation must lie in (0, 1], got {self.relaxation}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValidationError("Picard tolerance must be positive and the iteration cap >= 1")


@dataclass(frozen=True, eq=False)
class GameSpec:
    lattice: Lattice
    coeffs: CouplingField
    layout: SubdomainLayout
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    targets: tuple[AdaptedField, ...]
    scenario: Scenario
    weights: WeightTables
    picard: PicardSettings = field(default_factory=PicardSettings)
    target_rho_cap: float = float("inf")

    def __post_init__(self) -> None:
        m = len(self.alpha)
        if m < 1:
            raise ValidationError("the game needs at least one follower")
        if len(self.beta) != m or len(self.targets) != m or self.layout.followers != m:
            raise ValidationError(
                f"follower count mismatch: alpha={m}, beta={len(self.beta)}, "
                f"targets={len(self.targets)}, regions={self.layout.followers}"
            )
        if any(a <= 0 for a in self.alpha):
            raise ValidationError(f"alpha_i > 0 violated: {self.alpha}")
        if any(b < 1 for b in self.beta):
            raise ValidationError(f"beta_i >= 1 violated: {self.beta}")
        n_x, steps = self.lattice.grid.n_x, self.lattice.tgrid.steps
        for i, target in enumerate(self.targets):
            if target.n_times != steps or target.n_comp != 2 or target.n_x != n_x:
                raise ValidationError(f"target of follower {i + 1} must be a 2-component path field")
        if self.coeffs.a.shape != (steps, 2, 2, n_x):
            raise ValidationError(f"coupling field shape {self.coeffs.a.shape} does not match the lattice")
        self.coeffs.check_stability(self.lattice.tgrid.dt)
        if self.scenario is Scenario.SECOND_COMPONENT:
            self._check_target_finiteness()

    def _check_target_finiteness(self) -> None:
        rho_sq = self.weights.rho_bar_sq_path()
        for i, target in enumerate(self.targets):
            energy = self.lattice.inner(target, target, self.layout.mask_od, rho_sq)
            if energy > self.target_rho_cap:
                logger.warning(
                    "rho-weighted target energy %s of follower %s exceeds cap %s",
                    energy,
                    i + 1,
                    self.target_rho_cap,
                )

    @property
    def followers(self) -> int:
        return len(self.alpha)

    @property
    def observed(self) -> np.ndarray:
        return self.scenario.observed

    @cached_property
    def feedback_weight(self) -> np.ndarray:
        """ρ*⁻² (weighted scenarios) or 1 at path times; 0 where control is inadmissible."""
        if self.scenario.weighted_cost:
            return self.weights.rho_star_inv_sq_path()
        return np.ones(self.lattice.tgrid.steps)

    @cached_property
    def penalty_weight(self) -> np.ndarray:
        if self.scenario.weighted_cost:
            return self.weights.rho_star_sq_path()
        return np.ones(self.lattice.tgrid.steps)

    @property
    def admissible(self) -> np.ndarray:
        return np.isfinite(self.penalty_weight)

    def replace(self, **changes) -> GameSpec:
        return dataclasses.replace(self, **changes)

    def without_targets(self) -> GameSpec:
        zero = self.lattice.path_zeros(2)
        return self.replace(targets=tuple(zero for _ in range(self.followers)))

    def map_followers(self, fn: Callable[[int], R]) -> list[R]:
        """fn(i) for every follower, on a thread pool when ``picard.workers`` > 1; ordered."""
        if self.picard.workers > 1 and self.followers > 1:
            with ThreadPoolExecutor(max_workers=self.picard.workers) as pool:
                return list(pool.map(fn, range(self.followers)))
        return [fn(i) for i in range(self.followers)]


@dataclass(frozen=True, eq=False)
class LeaderControls:
    u1: AdaptedField
    u2: AdaptedField
    u3: AdaptedField

    @classmethod
    def zeros(cls, lattice: Lattice) -> LeaderControls:
        zero = lattice.path_zeros(1)
        return cls(zero, zero, zero)

    @classmethod
    def random(cls, rng: np.random.Generator, lattice: Lattice, mask_g0: np.ndarray) -> LeaderControls:
        tgrid, n_x = lattice.tgrid, lattice.grid.n_x
        u1 = AdaptedField.random(rng, tgrid, 1, n_x, tgrid.steps).masked(mask_g0)
        return cls(
            u1,
            AdaptedField.random(rng, tgrid, 1, n_x, tgrid.steps),
            AdaptedField.random(rng, tgrid, 1, n_x, tgrid.steps),
        )

    def noise_field(self) -> AdaptedField:
        return AdaptedField.stack_components([self.u2, self.u3])

    def __add__(self, other: LeaderControls) -> LeaderControls:
        return LeaderControls(self.u1 + other.u1, self.u2 + other.u2, self.u3 + other.u3)

    def __mul__(self, scalar: float) -> LeaderControls:
        return LeaderControls(self.u1 * scalar, self.u2 * scalar, self.u3 * scalar)

    __rmul__ = __mul__

    def energy(self, lattice: Lattice, mask_g0: np.ndarray) -> float:
        """E∬ χ_{G_0} u₁² + u₂² + u₃²."""
        return (
            lattice.inner(self.u1, self.u1, mask_g0)
            + lattice.inner(self.u2, self.u2)
            + lattice.inner(self.u3, self.u3)
        )


@dataclass(frozen=True, eq=False)
class FollowerControls:
    v: tuple[AdaptedField, ...]

    @classmethod
    def zeros(cls, lattice: Lattice, followers: int) -> FollowerControls:
        zero = lattice.path_zeros(1)
        return cls(tuple(zero for _ in range(followers)))

    def __add__(self, other: FollowerControls) -> FollowerControls:
        return FollowerControls(tuple(a + b for a, b in zip(self.v, other.v)))

    def __sub__(self, other: FollowerControls) -> FollowerControls:
        return FollowerControls(tuple(a - b for a, b in zip(self.v, other.v)))

    def __mul__(self, scalar: float) -> FollowerControls:
        return FollowerControls(tuple(a * scalar for a in self.v))

    __rmul__ = __mul__

    def replaced(self, i: int, vi: AdaptedField) -> FollowerControls:
        return FollowerControls(tuple(vi if j == i else v for j, v in enumerate(self.v)))

    def distance(self, other: FollowerControls, lattice: Lattice) -> float:
        return float(np.sqrt(sum(lattice.inner(d, d) for d in (self - other).v)))


@dataclass(frozen=True, eq=False)
class PicardReport:
    iterations: int
    contraction: float
    relaxation: float
    history: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class CoupledAdjointSolution:
    phi: BackwardSolution
    psi: tuple[AdaptedField, ...]
    h: AdaptedField
    report: PicardReport

    @property
    def Phi(self) -> AdaptedField:  # noqa: N802
        return self.phi.martingale


@dataclass(frozen=True, eq=False)
class ClosedLoopSolution:
    state: AdaptedField
    adjoints: tuple[BackwardSolution, ...]
    followers: FollowerControls
    report: PicardReport


@dataclass(frozen=True)
class Functionals:
    leader: float
    followers: tuple[float, ...]


def contraction_factor(history: Sequence[float]) -> float:
    """Geometric mean ratio of successive relative changes."""
    changes = [c for c in history if c > 0]
    if len(changes) < 2:
        return 0.0
    ratios = np.array(changes[1:]) / np.array(changes[:-1])
    return float(np.exp(np.mean(np.log(ratios[-5:]))))


def picard(
    update: Callable[[np.ndarray], np.ndarray],
    initial: np.ndarray,
    metric: np.ndarray,
    settings: PicardSettings,
    label: str,
) -> tuple[np.ndarray, PicardReport]:
    """Damped fixed-point iteration x <- (1-ω)x + ω T(x); returns T(x) at convergence.

    ω is halved after three consecutive increases of the relative change, at most
    ``max_halvings`` times.
    """
    x = initial
    omega = settings.relaxation
    halvings = increases = 0
    previous: float | None = None
    history: list[float] = []
    for iteration in range(1, settings.max_iter + 1):
        tx = update(x)
        diff = tx - x
        size = float(np.sqrt(np.dot(metric, tx * tx)))
        step = float(np.sqrt(np.dot(metric, diff * diff)))
        change = 0.0 if step == 0 else step / max(size, np.finfo(float).tiny)
        history.append(change)
        logger.debug("%s iteration %s relative change %.3e", label, iteration, change)
        if change <= settings.tol:
            report = PicardReport(iteration, contraction_factor(history), omega, tuple(history))
            logger.debug("%s converged in %s iterations", label, iteration)
            return tx, report
        increases = increases + 1 if previous is not None and change > previous else 0
        if increases >= 3:
            if halvings >= settings.max_halvings:
                logger.error("%s does not contract after %s halvings", label, halvings)
                raise NonContractionError(
                    f"{label}: Picard iteration does not contract; increase beta_i "
                    "(the coupling must be dominated by the follower cost weights)"
                )
            omega /= 2
            halvings += 1
            increases = 0
            logger.warning("%s relative change grew 3 times, relaxation halved to %s", label, omega)
        previous = change
        x = x + omega * diff
    logger.error("%s hit the iteration cap %s", label, settings.max_iter)
    raise NonContractionError(
        f"{label}: no convergence to {settings.tol} in {settings.max_iter} iterations; increase beta_i"
    )


def _pack(fields: Sequence[AdaptedField]) -> np.ndarray:
    return np.concatenate([f.flatten() for f in fields])


def _unpack(vector: np.ndarray, like: AdaptedField, count: int) -> list[AdaptedField]:
    size = like.size
    return [like.unflatten(vector[i * size : (i + 1) * size]) for i in range(count)]


def _packed_metric(spec: GameSpec, n_comp: int) -> np.ndarray:
    tgrid, grid = spec.lattice.tgrid, spec.lattice.grid
    return np.tile(path_metric(tgrid, grid, n_comp, tgrid.steps), spec.followers)


def solve_state(
    spec: GameSpec, y0: np.ndarray, leaders: LeaderControls, followers: FollowerControls
) -> AdaptedField:
    """Forward sweep with u₁χ_{G_0} + Σ v_i χ_{G_i} on component 1 and noise (u₂, u₃)."""
    if len(followers.v) != spec.followers:
        raise ValidationError(f"expected {spec.followers} follower controls, got {len(followers.v)}")
    follower_sources = tuple(
        LocalizedSource(mask, v) for mask, v in zip(spec.layout.masks_gi, followers.v)
    )
    src = SourceSpec(
        noise=leaders.noise_field(),
        localized=(LocalizedSource(spec.layout.mask_g0, leaders.u1), *follower_sources),
    )
    return forward_sweep(y0, spec.lattice, spec.coeffs, src)


def solve_free_state(spec: GameSpec, y0: np.ndarray, leaders: LeaderControls) -> AdaptedField:
    """The q-system: the state with every follower control switched off."""
    return solve_state(spec, y0, leaders, FollowerControls.zeros(spec.lattice, spec.followers))


def follower_adjoint_drift(spec: GameSpec, i: int, state: AdaptedField) -> AdaptedField:
    """F_i = -α_i (y - y_d^i) χ_{O_d} on the observed components."""
    misfit = state.path() - spec.targets[i]
    return misfit.masked(spec.layout.mask_od).component_scaled(spec.observed) * (-spec.alpha[i])


def solve_follower_adjoint(spec: GameSpec, state: AdaptedField) -> tuple[BackwardSolution, ...]:
    if state.n_times != spec.lattice.tgrid.steps + 1 or state.n_x != spec.lattice.grid.n_x:
        raise ValidationError("state was not computed on the lattice of this game")
    terminal = spec.lattice.terminal_zeros(2)
    return tuple(
        spec.map_followers(
            lambda i: backward_sweep(
                terminal, spec.lattice, spec.coeffs, follower_adjoint_drift(spec, i, state)
            )
        )
    )


def follower_cost(spec: GameSpec, i: int, vi: AdaptedField, state: AdaptedField) -> float:
    lattice = spec.lattice
    misfit = follower_adjoint_drift(spec, i, state) * (-1.0 / spec.alpha[i])
    tracking = 0.5 * spec.alpha[i] * lattice.inner(misfit, misfit)
    control = 0.5 * spec.beta[i] * lattice.inner(vi, vi, spec.layout.masks_gi[i], spec.penalty_weight)
    return tracking + control


def evaluate_functionals(
    spec: GameSpec, leaders: LeaderControls, followers: FollowerControls, state: AdaptedField
) -> Functionals:
    leader = 0.5 * leaders.energy(spec.lattice, spec.layout.mask_g0)
    return Functionals(
        leader=leader,
        followers=tuple(
            follower_cost(spec, i, followers.v[i], state) for i in range(spec.followers)
        ),
    )


def feedback_controls(spec: GameSpec, adjoint_paths: Sequence[AdaptedField]) -> FollowerControls:
    """v_i = -(1/β_i) ρ*⁻² z₁ⁱ χ_{G_i} (the ρ*⁻² factor only in the weighted scenarios)."""
    weight = spec.feedback_weight
    return FollowerControls(
        tuple(
            path.component(0).masked(spec.layout.masks_gi[i]).time_scaled(weight) * (-1.0 / spec.beta[i])
            for i, path in enumerate(adjoint_paths)
        )
    )


def solve_optimality_system(
    spec: GameSpec, y0: np.ndarray, leaders: LeaderControls
) -> ClosedLoopSolution:
    """Picard fixed point of the state under the Nash feedback and the follower adjoints."""
    lattice = spec.lattice
    like = lattice.path_zeros(2)
    terminal = lattice.terminal_zeros(2)

    def update(packed: np.ndarray) -> np.ndarray:
        followers = feedback_controls(spec, _unpack(packed, like, spec.followers))
        state = solve_state(spec, y0, leaders, followers)
        paths = spec.map_followers(
            lambda i: backward_sweep(
                terminal, lattice, spec.coeffs, follower_adjoint_drift(spec, i, state)
            ).path
        )
        return _pack(paths)

    packed, report = picard(
        update,
        np.zeros(like.size * spec.followers),
        _packed_metric(spec, 2),
        spec.picard,
        "optimality system",
    )
    followers = feedback_controls(spec, _unpack(packed, like, spec.followers))
    state = solve_state(spec, y0, leaders, followers)
    adjoints = solve_follower_adjoint(spec, state)
    return ClosedLoopSolution(state=state, adjoints=adjoints, followers=followers, report=report)


def _phi_drift(spec: GameSpec, psi_paths: Sequence[AdaptedField]) -> AdaptedField:
    drift = spec.lattice.path_zeros(2)
    for alpha, psi in zip(spec.alpha, psi_paths):
        drift = drift + psi * alpha
    return drift.masked(spec.layout.mask_od).component_scaled(spec.observed)


def _psi_sources(spec: GameSpec, phi_path: AdaptedField, i: int) -> SourceSpec:
    forcing = phi_path.component(0).time_scaled(spec.feedback_weight)
    return SourceSpec(
        localized=(LocalizedSource(spec.layout.masks_gi[i], forcing, gain=1.0 / spec.beta[i]),)
    )


def solve_coupled_adjoint(spec: GameSpec, phi_t: np.ndarray) -> CoupledAdjointSolution:
    """Backward φ with Σ α_i ψ^i χ_{O_d} coupled to forward ψ^i driven by (1/β_i) ρ*⁻² φ₁ χ_{G_i}."""
    lattice = spec.lattice
    phi_t = np.asarray(phi_t, dtype=float)
    if phi_t.shape != lattice.terminal_zeros(2).shape:
        raise ValidationError(f"terminal datum must have shape {lattice.terminal_zeros(2).shape}")
    like = lattice.path_zeros(2)
    zero_start = np.zeros((1, 2, lattice.grid.n_x))

    def update(packed: np.ndarray) -> np.ndarray:
        phi = backward_sweep(phi_t, lattice, spec.coeffs, _phi_drift(spec, _unpack(packed, like, spec.followers)))
        paths = spec.map_followers(
            lambda i: forward_sweep(zero_start, lattice, spec.coeffs, _psi_sources(spec, phi.path, i)).path()
        )
        return _pack(paths)

    packed, report = picard(
        update,
        np.zeros(like.size * spec.followers),
        _packed_metric(spec, 2),
        spec.picard,
        "coupled adjoint",
    )
    phi = backward_sweep(phi_t, lattice, spec.coeffs, _phi_drift(spec, _unpack(packed, like, spec.followers)))
    psi = tuple(
        spec.map_followers(
            lambda i: forward_sweep(zero_start, lattice, spec.coeffs, _psi_sources(spec, phi.path, i))
        )
    )
    h = lattice.state_zeros(2)
    for alpha, psi_i in zip(spec.alpha, psi):
        h = h + psi_i * alpha
    return CoupledAdjointSolution(phi=phi, psi=psi, h=h, report=report)


def leaders_from_adjoint(spec: GameSpec, coupled: CoupledAdjointSolution) -> LeaderControls:
    """(u₁, u₂, u₃) = (χ_{G_0} φ₁, Φ₁, Φ₂)."""
    return LeaderControls(
        u1=coupled.phi.path.component(0).masked(spec.layout.mask_g0),
        u2=coupled.Phi.component(0),
        u3=coupled.Phi.component(1),
    )


def game_duality_terms(
    spec: GameSpec,
    y0: np.ndarray,
    leaders: LeaderControls,
    state: AdaptedField,
    coupled: CoupledAdjointSolution,
) -> tuple[float, float]:
    """E⟨y(T), φᵀ⟩ - E⟨y⁰, φ(0)⟩ against E∬(χ_{G_0}u₁φ₁ + u₂Φ₁ + u₃Φ₂) + Σ α_i E∬ y_d^i ψ^i χ_{O_d}."""
    lattice = spec.lattice
    y0 = np.asarray(y0, dtype=float).reshape(1, 2, lattice.grid.n_x)
    lhs = lattice.terminal_inner(state.terminal, coupled.phi.terminal) - lattice.terminal_inner(
        y0, coupled.phi.initial
    )
    rhs = (
        lattice.inner(leaders.u1, coupled.phi.path.component(0), spec.layout.mask_g0)
        + lattice.inner(leaders.u2, coupled.Phi.component(0))
        + lattice.inner(leaders.u3, coupled.Phi.component(1))
    )
    for alpha, target, psi in zip(spec.alpha, spec.targets, coupled.psi):
        rhs += alpha * lattice.inner(
            target.component_scaled(spec.observed), psi, spec.layout.mask_od
        )
    return lhs, rhs


def game_duality_residual(
    spec: GameSpec,
    y0: np.ndarray,
    leaders: LeaderControls,
    state: AdaptedField,
    coupled: CoupledAdjointSolution,
) -> float:
    lhs, rhs = game_duality_terms(spec, y0, leaders, state, coupled)
    return abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs))


def psi_energy_ratio(spec: GameSpec, phi_t: np.ndarray) -> float:
    """Σ E∬|ψ^i|² over the ρ-weighted φ₁ energy that bounds it.

    Weighted scenarios compare against E∬ ρ*⁻⁴ |φ₁|²; the second-component scenario weights
    both sides by ρ⁻².
    """
    coupled = solve_coupled_adjoint(spec, phi_t)
    lattice = spec.lattice
    phi1 = coupled.phi.path.component(0)
    if spec.scenario.weighted_cost:
        psi_weight = None
        phi_weight = spec.feedback_weight**2
    else:
        psi_weight = spec.weights.rho_bar_inv_sq_path()
        phi_weight = psi_weight
    numerator = sum(lattice.inner(psi, psi, time_weight=psi_weight) for psi in coupled.psi)
    denominator = lattice.inner(phi1, phi1, time_weight=phi_weight)
    if denominator == 0:
        return 0.0 if numerator == 0 else float("inf")
    return numerator / denominator
