"""Leader synthesis by penalized HUM on the Gramian of the coupled adjoint system.

The Gramian maps a terminal datum φᵀ to the closed-loop terminal state driven from rest
(zero targets) by the leaders (χ_{G_0}φ₁, Φ₁, Φ₂). By duality ⟨Gφᵀ, φᵀ⟩ is the control
energy, so G is symmetric positive semidefinite and (G + εI)φᵀ = -y_free(T) is solved
by conjugate gradient.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from stackelberg_lab import CGStagnationError, ObservabilityError, ValidationError, logger
from stackelberg_lab.nash import nash_residual
from stackelberg_lab.noise_tree import AdaptedField
from stackelberg_lab.parabolic_core import Lattice
from stackelberg_lab.systems import (
    ClosedLoopSolution,
    CoupledAdjointSolution,
    GameSpec,
    LeaderControls,
    PicardSettings,
    leaders_from_adjoint,
    solve_coupled_adjoint,
    solve_optimality_system,
)

STAGNATION_WINDOW = 50
STAGNATION_FACTOR = 10.0
DENSE_MAX_NODES = 9
DENSE_MAX_LEVELS = 3


def dense_observability_supported(lattice: Lattice) -> bool:
    """Whether the dense observability eigensolve fits this lattice."""
    return lattice.grid.n_x <= DENSE_MAX_NODES and lattice.tgrid.noise_levels <= DENSE_MAX_LEVELS


@dataclass(frozen=True)
class HumParams:
    epsilon: float
    cg_tol: float = 1e-8
    cg_max_iter: int = 500
    picard: PicardSettings | None = None

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.cg_tol <= 1e-2:
            raise ValidationError(f"cg_tol must lie in (0, 1e-2], got {self.cg_tol}")


@dataclass(frozen=True, eq=False)
class HumSolution:
    phi_t_star: np.ndarray
    leaders: LeaderControls
    closed_loop: ClosedLoopSolution
    terminal_norm: float
    j_value: float
    cg_iterations: int
    identity_residual: float
    scale: float
    epsilon: float
    control_norms: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    terminal_norm: float
    u1_norm: float
    u2_norm: float
    u3_norm: float
    j_value: float
    identity_residual: float
    cg_iterations: int
    scale: float


@dataclass(frozen=True)
class SweepTable:
    """One ε ladder.

    ``control_bound_ratio`` is max‖u_ε‖² over the data energy ‖y⁰‖² + Σ‖y_d^i‖². It is reported
    only: the constant of the control estimate is not known on a lattice, so the gate is on
    ``control_norm_ratio`` and on the ratio being finite.
    """

    rows: tuple[SweepRow, ...]
    slope: float
    max_control_norm: float
    control_norm_ratio: float
    control_bound_ratio: float


class ObservabilityMode(Enum):
    SAMPLED = "sampled"
    DENSE = "dense"


@dataclass(frozen=True)
class ObservabilityReport:
    max_ratio: float
    min_gramian_eig_estimate: float | None
    ratios: tuple[float, ...]
    flagged: tuple[int, ...]

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.max_ratio)) and not self.flagged


def _spec_for(spec: GameSpec, params: HumParams) -> GameSpec:
    return spec if params.picard is None else spec.replace(picard=params.picard)


def gramian_apply(spec: GameSpec, phi_t: np.ndarray) -> np.ndarray:
    """Closed-loop y(T) from y⁰ = 0, y_d = 0 under the leaders read off the coupled adjoint."""
    coupled = solve_coupled_adjoint(spec, phi_t)
    leaders = leaders_from_adjoint(spec, coupled)
    zero_y0 = np.zeros((1, 2, spec.lattice.grid.n_x))
    return solve_optimality_system(spec.without_targets(), zero_y0, leaders).state.terminal


def conjugate_gradient(
    apply: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    inner: Callable[[np.ndarray, np.ndarray], float],
    epsilon: float,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, int]:
    """CG for (G + εI)x = b in the inner product ``inner``, starting from x = 0.

    Raises when the residual has not dropped by STAGNATION_FACTOR over STAGNATION_WINDOW
    iterations or when the iteration cap is hit.
    """
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = inner(r, r)
    target = tol * np.sqrt(rr)
    history = [np.sqrt(rr)]
    if rr == 0:
        return x, 0
    for iteration in range(1, max_iter + 1):
        ap = apply(p) + epsilon * p
        step = rr / inner(p, ap)
        x = x + step * p
        r = r - step * ap
        rr_next = inner(r, r)
        history.append(np.sqrt(rr_next))
        logger.debug("CG iteration %s residual %.3e", iteration, history[-1])
        if history[-1] <= target:
            return x, iteration
        if iteration >= STAGNATION_WINDOW and history[-1] > history[-1 - STAGNATION_WINDOW] / STAGNATION_FACTOR:
            logger.error("CG stagnated at residual %.3e", history[-1])
            raise CGStagnationError(
                f"CG residual {history[-1]:.3e} not reduced {STAGNATION_FACTOR:g}x over "
                f"{STAGNATION_WINDOW} iterations; the Gramian may be ill conditioned at this epsilon"
            )
        p = r + (rr_next / rr) * p
        rr = rr_next
    logger.error("CG hit the iteration cap %s", max_iter)
    raise CGStagnationError(f"CG did not reach {tol} in {max_iter} iterations")


def solve_leader(spec: GameSpec, y0: np.ndarray, params: HumParams) -> HumSolution:
    """Minimize J_ε by solving (G + εI)φᵀ = -y_free(T) and synthesize (χ_{G_0}φ₁, Φ₁, Φ₂)."""
    spec = _spec_for(spec, params)
    lattice = spec.lattice
    y0 = np.asarray(y0, dtype=float).reshape(1, 2, lattice.grid.n_x)
    logger.info("HUM solve at epsilon=%s", params.epsilon)
    free = solve_optimality_system(spec, y0, LeaderControls.zeros(lattice))
    b = free.state.terminal
    scale = 1.0 + lattice.terminal_norm(b)
    phi_t, iterations = conjugate_gradient(
        lambda phi: gramian_apply(spec, phi),
        -b,
        lattice.terminal_inner,
        params.epsilon,
        params.cg_tol,
        params.cg_max_iter,
    )
    coupled = solve_coupled_adjoint(spec, phi_t)
    leaders = leaders_from_adjoint(spec, coupled)
    closed = solve_optimality_system(spec, y0, leaders)
    y_t = closed.state.terminal
    energy = leaders.energy(lattice, spec.layout.mask_g0)
    norms = (
        lattice.norm(leaders.u1, spec.layout.mask_g0),
        lattice.norm(leaders.u2),
        lattice.norm(leaders.u3),
    )
    solution = HumSolution(
        phi_t_star=phi_t,
        leaders=leaders,
        closed_loop=closed,
        terminal_norm=lattice.terminal_norm(y_t),
        j_value=0.5 * energy,
        cg_iterations=iterations,
        identity_residual=lattice.terminal_norm(y_t + params.epsilon * phi_t),
        scale=scale,
        epsilon=params.epsilon,
        control_norms=norms,
    )
    logger.info(
        "HUM epsilon=%s: |y(T)|=%.3e after %s CG iterations, identity residual %.3e",
        params.epsilon,
        solution.terminal_norm,
        iterations,
        solution.identity_residual,
    )
    return solution


def hierarchy_residual(spec: GameSpec, y0: np.ndarray, solution: HumSolution) -> float:
    """Nash residual of the followers induced by the synthesized leaders."""
    residual = nash_residual(spec, y0, solution.leaders, solution.closed_loop.followers)
    return max(residual.norms)


def data_energy(spec: GameSpec, y0: np.ndarray) -> float:
    """‖y⁰‖² + Σ target energies (ρ-weighted in the second-component scenario)."""
    lattice = spec.lattice
    y0 = np.asarray(y0, dtype=float).reshape(1, 2, lattice.grid.n_x)
    weight = None if spec.scenario.weighted_cost else spec.weights.rho_bar_sq_path()
    targets = sum(lattice.inner(t, t, spec.layout.mask_od, weight) for t in spec.targets)
    return lattice.terminal_inner(y0, y0) + targets


def epsilon_sweep(
    spec: GameSpec, y0: np.ndarray, eps_list: list[float], params: HumParams
) -> SweepTable:
    """solve_leader along a decreasing ε ladder with the log-log slope of ‖y(T)‖."""
    if len(eps_list) < 3 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValidationError(f"epsilon ladder must be strictly decreasing with >= 3 entries: {eps_list}")
    rows = []
    for eps in eps_list:
        sol = solve_leader(spec, y0, HumParams(eps, params.cg_tol, params.cg_max_iter, params.picard))
        rows.append(
            SweepRow(
                epsilon=eps,
                terminal_norm=sol.terminal_norm,
                u1_norm=sol.control_norms[0],
                u2_norm=sol.control_norms[1],
                u3_norm=sol.control_norms[2],
                j_value=sol.j_value,
                identity_residual=sol.identity_residual,
                cg_iterations=sol.cg_iterations,
                scale=sol.scale,
            )
        )
    terminal = np.array([r.terminal_norm for r in rows])
    controls = np.array([np.sqrt(2 * r.j_value) for r in rows])
    if np.all(terminal > 0):
        slope = float(np.polyfit(np.log(eps_list), np.log(terminal), 1)[0])
    else:
        slope = 0.0
    positive = controls[controls > 0]
    ratio = float(positive.max() / positive.min()) if positive.size else 1.0
    energy = data_energy(spec, y0)
    bound = float(np.max(controls**2) / energy) if energy > 0 else 0.0
    logger.info("epsilon sweep slope %.3f, control ratio %.3f", slope, ratio)
    return SweepTable(
        rows=tuple(rows),
        slope=slope,
        max_control_norm=float(controls.max()),
        control_norm_ratio=ratio,
        control_bound_ratio=bound,
    )


def _observed_energy(spec: GameSpec, coupled: CoupledAdjointSolution) -> float:
    lattice = spec.lattice
    phi1 = coupled.phi.path.component(0)
    return (
        lattice.inner(phi1, phi1, spec.layout.mask_g0)
        + lattice.inner(coupled.Phi.component(0), coupled.Phi.component(0))
        + lattice.inner(coupled.Phi.component(1), coupled.Phi.component(1))
    )


def _initial_energy(spec: GameSpec, coupled: CoupledAdjointSolution) -> float:
    lattice = spec.lattice
    weight = None if spec.scenario.weighted_cost else spec.weights.rho_bar_inv_sq_path()
    psi = sum(lattice.inner(p, p, time_weight=weight) for p in coupled.psi)
    return lattice.terminal_inner(coupled.phi.initial, coupled.phi.initial) + psi


def observability_ratio(spec: GameSpec, phi_t: np.ndarray) -> float:
    """(E|φ(0)|² + Σ E∬|ψ^i|²) / E∬(χ_{G_0}|φ₁|² + |Φ₁|² + |Φ₂|²) for one probe."""
    if not np.any(phi_t):
        raise ObservabilityError("zero probe rejected: the observability ratio needs φᵀ ≠ 0")
    coupled = solve_coupled_adjoint(spec, phi_t)
    observed = _observed_energy(spec, coupled)
    lhs = _initial_energy(spec, coupled)
    if observed <= 1e-300 * max(spec.lattice.terminal_inner(phi_t, phi_t), 1.0):
        return float("inf")
    return lhs / observed


def _observation_columns(spec: GameSpec) -> tuple[np.ndarray, np.ndarray]:
    """Square-root-metric images of every terminal basis vector for both sides."""
    lattice = spec.lattice
    shape = lattice.terminal_zeros(2).shape
    n = int(np.prod(shape))
    sqrt_dt = np.sqrt(lattice.tgrid.dt * lattice.grid.h)
    rhs_columns, lhs_columns = [], []
    weight = None if spec.scenario.weighted_cost else spec.weights.rho_bar_inv_sq_path()
    for j in range(n):
        basis = np.zeros(n)
        basis[j] = 1.0
        coupled = solve_coupled_adjoint(spec, basis.reshape(shape))
        observed = [
            coupled.phi.path.component(0).masked(spec.layout.mask_g0),
            coupled.Phi.component(0),
            coupled.Phi.component(1),
        ]
        rhs_columns.append(np.concatenate([_scaled(f, lattice, sqrt_dt) for f in observed]))
        psi_parts = [
            _scaled(p.path() if weight is None else p.path().time_scaled(np.sqrt(weight)), lattice, sqrt_dt)
            for p in coupled.psi
        ]
        initial = coupled.phi.initial.ravel() * np.sqrt(lattice.grid.h)
        lhs_columns.append(np.concatenate([initial, *psi_parts]))
    return np.array(rhs_columns).T, np.array(lhs_columns).T


def _scaled(f: AdaptedField, lattice: Lattice, sqrt_dt: float) -> np.ndarray:
    tgrid = lattice.tgrid
    return np.concatenate(
        [arr.ravel() * sqrt_dt / np.sqrt(2 ** tgrid.level(m)) for m, arr in enumerate(f.values[: tgrid.steps])]
    )


def observability_rayleigh(
    spec: GameSpec,
    n_probes: int,
    mode: ObservabilityMode,
    rng: np.random.Generator,
) -> ObservabilityReport:
    """Discrete observability constant: max LHS/RHS over probes, or a dense eigensolve."""
    lattice = spec.lattice
    shape = lattice.terminal_zeros(2).shape
    if mode is ObservabilityMode.DENSE:
        if not dense_observability_supported(lattice):
            raise ValidationError(
                f"dense observability mode needs n_x <= {DENSE_MAX_NODES} and K <= {DENSE_MAX_LEVELS}"
            )
        observed, initial = _observation_columns(spec)
        rhs_form = observed.T @ observed
        lhs_form = initial.T @ initial
        terminal_weight = lattice.grid.h / 2**lattice.tgrid.noise_levels
        min_eig = float(scipy.linalg.eigvalsh(rhs_form)[0] / terminal_weight)
        try:
            ratios = scipy.linalg.eigh(lhs_form, rhs_form, eigvals_only=True)
            max_ratio = float(ratios[-1])
            flagged: tuple[int, ...] = ()
        except np.linalg.LinAlgError:
            logger.warning("observed energy form is singular at this discretization")
            max_ratio, flagged = float("inf"), (0,)
        logger.info("dense observability: max ratio %.3e, min Gramian eigenvalue %.3e", max_ratio, min_eig)
        return ObservabilityReport(max_ratio, min_eig, (max_ratio,), flagged)

    ratios = []
    flagged = []
    for probe in range(n_probes):
        phi_t = rng.standard_normal(shape)
        ratio = observability_ratio(spec, phi_t)
        if not np.isfinite(ratio):
            logger.warning("observability probe %s has vanishing observed energy", probe)
            flagged.append(probe)
        ratios.append(ratio)
    max_ratio = float(max(ratios))
    logger.info("sampled observability over %s probes: max ratio %.3e", n_probes, max_ratio)
    return ObservabilityReport(max_ratio, None, tuple(ratios), tuple(flagged))
