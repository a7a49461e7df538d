"""One-step linear algebra of the forward and backward stochastic parabolic sweeps.

Forward step on the PDE clock::

    y_{m+1} = branch((I - dt Δ_h)⁻¹ ((I + dt A_m) y_m + dt f_m)) + [mean_r g_{kR+r}] ΔW_k

Backward step, written so it is the exact transpose of the forward one::

    w_m = (I - dt Δ_h)⁻¹ E[z_{m+1} | F_k],   Z = martingale coefficient of z_{m+1}
    z_m = (I + dt A_mᵀ) w_m - dt F_m

With the left-endpoint quadrature this gives, for any sources,
E⟨y_M, z_M⟩ - E⟨y_0, z_0⟩ = Σ dt E⟨f, w⟩ + Σ dt E⟨g, Z⟩ + Σ dt E⟨y, F⟩.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from stackelberg_lab import ValidationError, logger
from stackelberg_lab.lattice_weights import SpatialGrid, TimeGrid
from stackelberg_lab.noise_tree import (
    AdaptedField,
    NoiseTree,
    branch,
    check_budget,
    conditional_expectation,
    expect_spacetime_inner,
    expect_terminal_inner,
    martingale_coefficient,
)


@dataclass(frozen=True, eq=False)
class CouplingField:
    """a_ij(t_m, x_j) sampled at the left endpoint of every PDE step, shape (M, n, n, n_x)."""

    a: np.ndarray

    def __post_init__(self) -> None:
        if self.a.ndim != 4 or self.a.shape[1] != self.a.shape[2]:
            raise ValidationError(f"coupling field must have shape (M, n, n, n_x), got {self.a.shape}")
        if not np.all(np.isfinite(self.a)):
            raise ValidationError("coupling coefficients must be finite")

    @classmethod
    def constant(
        cls, a11: float, a12: float, a21: float, a22: float, tgrid: TimeGrid, grid: SpatialGrid
    ) -> CouplingField:
        block = np.array([[a11, a12], [a21, a22]], dtype=float)
        a = np.broadcast_to(block[None, :, :, None], (tgrid.steps, 2, 2, grid.n_x)).copy()
        return cls(a)

    @classmethod
    def zero(cls, tgrid: TimeGrid, grid: SpatialGrid, n_comp: int = 2) -> CouplingField:
        return cls(np.zeros((tgrid.steps, n_comp, n_comp, grid.n_x)))

    @property
    def n_comp(self) -> int:
        return self.a.shape[1]

    @property
    def sup_norm(self) -> float:
        """max over (t, x) of the row-sum norm of a(t, x)."""
        return float(np.max(np.sum(np.abs(self.a), axis=2)))

    def check_stability(self, dt: float) -> None:
        if dt * self.sup_norm >= 1.0:
            logger.error("dt*|A| = %s violates the explicit coupling bound", dt * self.sup_norm)
            raise ValidationError(
                f"stability condition dt*|A|_inf < 1 violated: dt={dt}, |A|_inf={self.sup_norm}"
            )

    def check_sign(self, mask_o0: np.ndarray, a0: float) -> int:
        """Sign s with s*a_21 >= a_0 > 0 on O_0 for every time."""
        if a0 <= 0:
            raise ValidationError(f"a_0 must be positive, got {a0}")
        a21 = self.a[:, 1, 0, :][:, mask_o0]
        if np.all(a21 >= a0):
            return 1
        if np.all(-a21 >= a0):
            return -1
        logger.error("a_21 fails the sign condition on O_0")
        raise ValidationError(f"a_21 ≥ a_0 > 0 (or -a_21 ≥ a_0) on O_0 violated for a_0={a0}")

    def step_matrix(self, m: int, dt: float) -> np.ndarray:
        """I + dt A_m as an (n, n, n_x) pointwise matrix."""
        eye = np.eye(self.n_comp)[:, :, None]
        return eye + dt * self.a[m]


def apply_pointwise(matrix: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.einsum("ijx,njx->nix", matrix, values)


def apply_pointwise_transpose(matrix: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.einsum("jix,njx->nix", matrix, values)


@dataclass(frozen=True, eq=False)
class DiffusionStencil:
    """Dirichlet 3-point Laplacian and the banded Cholesky factor of I - dt Δ_h."""

    grid: SpatialGrid
    dt: float
    factor: np.ndarray

    @classmethod
    def build(cls, grid: SpatialGrid, dt: float) -> DiffusionStencil:
        n, r = grid.n_x, dt / grid.h**2
        banded = np.zeros((2, n))
        banded[0, 1:] = -r
        banded[1, :] = 1.0 + 2.0 * r
        factor = scipy.linalg.cholesky_banded(banded, lower=False)
        stencil = cls(grid=grid, dt=dt, factor=factor)
        residual = stencil.factorization_residual()
        if residual > 1e-12:
            raise ValidationError(f"factorization residual {residual:.3e} above 1e-12")
        return stencil

    def laplacian_dense(self) -> np.ndarray:
        n, h = self.grid.n_x, self.grid.h
        return (np.diag(-2.0 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)) / h**2

    def implicit_dense(self) -> np.ndarray:
        return np.eye(self.grid.n_x) - self.dt * self.laplacian_dense()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """(I - dt Δ_h)⁻¹ applied along the last axis."""
        shape = rhs.shape
        columns = rhs.reshape(-1, shape[-1]).T
        out = scipy.linalg.cho_solve_banded((self.factor, False), columns)
        return out.T.reshape(shape)

    def factorization_residual(self) -> float:
        probe = np.sin(np.arange(1, self.grid.n_x + 1) * 0.7)[None, :]
        solved = self.solve(probe)
        return float(np.max(np.abs(solved @ self.implicit_dense().T - probe)) / np.max(np.abs(probe)))


@dataclass(frozen=True, eq=False)
class Lattice:
    grid: SpatialGrid
    tgrid: TimeGrid
    tree: NoiseTree
    stencil: DiffusionStencil

    @classmethod
    def build(cls, grid: SpatialGrid, tgrid: TimeGrid, max_levels: int = 12) -> Lattice:
        check_budget(tgrid, 2, grid.n_x, max_levels=max_levels)
        return cls(
            grid=grid,
            tgrid=tgrid,
            tree=NoiseTree.from_time_grid(tgrid),
            stencil=DiffusionStencil.build(grid, tgrid.dt),
        )

    def path_zeros(self, n_comp: int = 2) -> AdaptedField:
        return AdaptedField.zeros(self.tgrid, n_comp, self.grid.n_x, self.tgrid.steps)

    def state_zeros(self, n_comp: int = 2) -> AdaptedField:
        return AdaptedField.zeros(self.tgrid, n_comp, self.grid.n_x)

    def terminal_zeros(self, n_comp: int = 2) -> np.ndarray:
        return np.zeros((2**self.tgrid.noise_levels, n_comp, self.grid.n_x))

    def terminal_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return expect_terminal_inner(a, b, self.grid)

    def terminal_norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.terminal_inner(a, a), 0.0)))

    def inner(
        self,
        a: AdaptedField,
        b: AdaptedField,
        mask: np.ndarray | None = None,
        time_weight: np.ndarray | None = None,
    ) -> float:
        return expect_spacetime_inner(a, b, self.grid, self.tgrid, mask, time_weight)

    def norm(self, a: AdaptedField, mask: np.ndarray | None = None, time_weight: np.ndarray | None = None) -> float:
        return float(np.sqrt(max(self.inner(a, a, mask, time_weight), 0.0)))


@dataclass(frozen=True, eq=False)
class LocalizedSource:
    """gain * χ_mask * field injected into one component (D = (1, 0)ᵀ by default)."""

    mask: np.ndarray
    field: AdaptedField
    gain: float = 1.0
    component: int = 0


@dataclass(frozen=True, eq=False)
class SourceSpec:
    drift: AdaptedField | None = None
    noise: AdaptedField | None = None
    localized: tuple[LocalizedSource, ...] = field(default_factory=tuple)

    def drift_at(self, m: int, shape: tuple[int, ...]) -> np.ndarray | None:
        if self.drift is None and not self.localized:
            return None
        out = np.zeros(shape)
        if self.drift is not None:
            out += self.drift.values[m]
        for src in self.localized:
            out[:, src.component, :] += src.gain * src.field.values[m][:, 0, :] * src.mask
        return out

    def drift_field(self, lattice: Lattice, n_comp: int = 2) -> AdaptedField:
        """All drift contributions as one path field."""
        if self.is_empty_drift:
            return lattice.path_zeros(n_comp)
        return AdaptedField.from_function(
            lattice.tgrid,
            lattice.tgrid.steps,
            lambda m, k: self.drift_at(m, (2**k, n_comp, lattice.grid.n_x)),
        )

    @property
    def is_empty_drift(self) -> bool:
        return self.drift is None and not self.localized

    def noise_mean(self, m: int, tgrid: TimeGrid) -> np.ndarray | None:
        """Average of g over the noise interval closed by step m."""
        if self.noise is None:
            return None
        first = m + 1 - tgrid.substeps
        return sum(self.noise.values[r] for r in range(first, m + 1)) / tgrid.substeps


@dataclass(frozen=True, eq=False)
class BackwardSolution:
    """Adjoint path w_m, martingale part Z (held over the sub-steps), z_0 and z_M."""

    path: AdaptedField
    martingale: AdaptedField
    initial: np.ndarray
    terminal: np.ndarray


def forward_step(
    y_m: np.ndarray, lattice: Lattice, coeffs: CouplingField, src: SourceSpec, m: int
) -> np.ndarray:
    tgrid = lattice.tgrid
    dt = tgrid.dt
    level = tgrid.level(m)
    if y_m.shape[0] != 2**level:
        raise ValidationError(f"state at m={m} must live on level {level}, got {y_m.shape[0]} nodes")
    rhs = apply_pointwise(coeffs.step_matrix(m, dt), y_m)
    drift = src.drift_at(m, y_m.shape)
    if drift is not None:
        rhs = rhs + dt * drift
    y_next = lattice.stencil.solve(rhs)
    if tgrid.level(m + 1) > level:
        y_next = branch(y_next)
        noise = src.noise_mean(m, tgrid)
        if noise is not None:
            y_next = y_next + branch(noise) * lattice.tree.increments(level)[:, None, None]
    return y_next


def backward_step(
    z_next: np.ndarray,
    lattice: Lattice,
    coeffs: CouplingField,
    backward_drift: AdaptedField | None,
    m: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Returns (w_m, z_m, Z) with Z only on noise-boundary steps."""
    tgrid = lattice.tgrid
    if z_next.shape[0] != 2 ** tgrid.level(m + 1):
        raise ValidationError(
            f"adjoint at m={m + 1} must live on level {tgrid.level(m + 1)}, got {z_next.shape[0]} nodes"
        )
    if tgrid.level(m + 1) > tgrid.level(m):
        z_hat = conditional_expectation(z_next)
        martingale = martingale_coefficient(z_next, lattice.tree)
    else:
        z_hat, martingale = z_next, None
    w = lattice.stencil.solve(z_hat)
    z_m = apply_pointwise_transpose(coeffs.step_matrix(m, tgrid.dt), w)
    if backward_drift is not None:
        z_m = z_m - tgrid.dt * backward_drift.values[m]
    return w, z_m, martingale


def forward_sweep(
    y0: np.ndarray, lattice: Lattice, coeffs: CouplingField, src: SourceSpec | None = None
) -> AdaptedField:
    src = src if src is not None else SourceSpec()
    coeffs.check_stability(lattice.tgrid.dt)
    y = np.asarray(y0, dtype=float).reshape(1, coeffs.n_comp, lattice.grid.n_x)
    states = [y]
    for m in range(lattice.tgrid.steps):
        y = forward_step(y, lattice, coeffs, src, m)
        states.append(y)
    return AdaptedField(tuple(states), lattice.tgrid.substeps)


def backward_sweep(
    terminal: np.ndarray,
    lattice: Lattice,
    coeffs: CouplingField,
    backward_drift: AdaptedField | None = None,
) -> BackwardSolution:
    tgrid = lattice.tgrid
    coeffs.check_stability(tgrid.dt)
    n_steps = tgrid.steps
    z = np.asarray(terminal, dtype=float)
    paths: list[np.ndarray] = [np.empty(0)] * n_steps
    martingales: list[np.ndarray] = [np.empty(0)] * n_steps
    held = None
    for m in range(n_steps - 1, -1, -1):
        w, z, martingale = backward_step(z, lattice, coeffs, backward_drift, m)
        if martingale is not None:
            held = martingale
        paths[m] = w
        martingales[m] = held
    return BackwardSolution(
        path=AdaptedField(tuple(paths), tgrid.substeps),
        martingale=AdaptedField(tuple(martingales), tgrid.substeps),
        initial=z,
        terminal=np.asarray(terminal, dtype=float),
    )


def duality_terms(
    lattice: Lattice,
    state: AdaptedField,
    adjoint: BackwardSolution,
    src: SourceSpec,
    backward_drift: AdaptedField | None,
) -> tuple[float, float]:
    """(LHS, RHS) of E⟨y_M, z_M⟩ - E⟨y_0, z_0⟩ = E∬ f·w + E∬ g·Z + E∬ y·F."""
    y0 = state.values[0]
    lhs = lattice.terminal_inner(state.terminal, adjoint.terminal) - lattice.terminal_inner(
        y0, adjoint.initial
    )
    rhs = 0.0
    if not src.is_empty_drift:
        rhs += lattice.inner(src.drift_field(lattice, state.n_comp), adjoint.path)
    if src.noise is not None:
        rhs += lattice.inner(src.noise, adjoint.martingale)
    if backward_drift is not None:
        rhs += lattice.inner(state, backward_drift)
    return lhs, rhs


def duality_residual(
    lattice: Lattice,
    state: AdaptedField,
    adjoint: BackwardSolution,
    src: SourceSpec,
    backward_drift: AdaptedField | None = None,
) -> float:
    """|LHS - RHS| / (1 + |LHS| + |RHS|) of the discrete Itô duality for one system pair."""
    lhs, rhs = duality_terms(lattice, state, adjoint, src, backward_drift)
    return abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs))


def adjoint_transposition_error(
    lattice: Lattice, coeffs: CouplingField, rng: np.random.Generator, n_probes: int = 20
) -> float:
    """Worst relative mismatch of E⟨y(T), φᵀ⟩ and ⟨y⁰, φ(0)⟩ over random probes."""
    worst = 0.0
    n_comp, n_x = coeffs.n_comp, lattice.grid.n_x
    for _ in range(n_probes):
        y0 = rng.standard_normal((1, n_comp, n_x))
        phi_t = rng.standard_normal(lattice.terminal_zeros(n_comp).shape)
        y_t = forward_sweep(y0, lattice, coeffs).terminal
        phi_0 = backward_sweep(phi_t, lattice, coeffs).initial
        lhs = lattice.terminal_inner(y_t, phi_t)
        rhs = lattice.terminal_inner(y0, phi_0)
        scale = lattice.terminal_norm(y_t) * lattice.terminal_norm(phi_t) + lattice.terminal_norm(
            y0
        ) * lattice.terminal_norm(phi_0)
        worst = max(worst, abs(lhs - rhs) / max(scale, np.finfo(float).tiny))
    logger.debug("adjoint transposition error over %s probes: %s", n_probes, worst)
    return worst


def energy_bound_ratio(
    lattice: Lattice, coeffs: CouplingField, y0: np.ndarray, src: SourceSpec | None = None
) -> float:
    """max_m (E|y_m|²)^{1/2} / (|y⁰| + |f| + |g|), the measured well-posedness constant."""
    src = src if src is not None else SourceSpec()
    state = forward_sweep(y0, lattice, coeffs, src)
    peak = max(lattice.terminal_norm(arr) for arr in state.values)
    data = lattice.terminal_norm(np.asarray(y0, dtype=float).reshape(1, coeffs.n_comp, -1))
    if not src.is_empty_drift:
        data += lattice.norm(src.drift_field(lattice, coeffs.n_comp))
    if src.noise is not None:
        data += lattice.norm(src.noise)
    return peak / data if data > 0 else 0.0
