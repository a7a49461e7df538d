"""Dense reference solver for tiny lattices.

Every discrete linear map is assembled as an explicit matrix over flattened adapted fields
(time-major, then tree node, then component, then space). The forward and backward maps are
built by two independent recursions so that their metric transposition can be checked
entry by entry; Nash and HUM problems are then solved by direct factorizations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from stackelberg_lab import SolverError, ValidationError, logger
from stackelberg_lab.nash import NashMethod, NashSolution
from stackelberg_lab.noise_tree import path_metric
from stackelberg_lab.parabolic_core import LocalizedSource, SourceSpec, backward_sweep, forward_sweep
from stackelberg_lab.systems import FollowerControls, GameSpec, LeaderControls

DEFAULT_DENSE_CAP = 20_000


@dataclass(frozen=True)
class FieldLayout:
    """Sizes of the time blocks of a flattened adapted field."""

    sizes: tuple[int, ...]

    @classmethod
    def of(cls, spec: GameSpec, n_comp: int, n_times: int) -> FieldLayout:
        tgrid, n_x = spec.lattice.tgrid, spec.lattice.grid.n_x
        return cls(tuple(2 ** tgrid.level(m) * n_comp * n_x for m in range(n_times)))

    @property
    def size(self) -> int:
        return sum(self.sizes)

    def block(self, m: int) -> slice:
        start = sum(self.sizes[:m])
        return slice(start, start + self.sizes[m])


def pointwise_dense(matrix: np.ndarray) -> np.ndarray:
    """(n, n, n_x) pointwise matrix as an (n n_x, n n_x) block matrix in component-major order."""
    n, _, n_x = matrix.shape
    return np.einsum("ijx,xy->ixjy", matrix, np.eye(n_x)).reshape(n * n_x, n * n_x)


def branch_dense(nodes: int, block: int) -> np.ndarray:
    return np.kron(np.repeat(np.eye(nodes), 2, axis=0), np.eye(block))


def _per_time(spec: GameSpec, n_comp: int, values: np.ndarray) -> np.ndarray:
    """Expand one value per path time to a flattened path vector."""
    layout = FieldLayout.of(spec, n_comp, spec.lattice.tgrid.steps)
    return np.concatenate([np.full(size, values[m]) for m, size in enumerate(layout.sizes)])


def _per_space(spec: GameSpec, profile: np.ndarray) -> np.ndarray:
    """Tile a (n_comp, n_x) spatial profile over every node of every path time."""
    tgrid = spec.lattice.tgrid
    return np.concatenate(
        [np.tile(profile.ravel(), 2 ** tgrid.level(m)) for m in range(tgrid.steps)]
    )


def embedding(spec: GameSpec, mask: np.ndarray, component: int = 0) -> np.ndarray:
    """1-component path field -> 2-component path field, χ_mask on ``component``."""
    tgrid = spec.lattice.tgrid
    unit = np.zeros((2, 1))
    unit[component, 0] = 1.0
    local = np.kron(unit, np.diag(np.asarray(mask, dtype=float)))
    return scipy.linalg.block_diag(
        *(np.kron(np.eye(2 ** tgrid.level(m)), local) for m in range(tgrid.steps))
    )


@dataclass(frozen=True, eq=False)
class DenseInstance:
    spec: GameSpec
    state_layout: FieldLayout
    path_layout: FieldLayout
    forward: np.ndarray
    backward_path: np.ndarray
    backward_martingale: np.ndarray
    backward_initial: np.ndarray

    @property
    def block(self) -> int:
        return 2 * self.spec.lattice.grid.n_x

    @property
    def n_terminal(self) -> int:
        return self.state_layout.sizes[-1]

    @property
    def terminal_weight(self) -> float:
        lattice = self.spec.lattice
        return lattice.grid.h / 2**lattice.tgrid.noise_levels

    @property
    def initial_weight(self) -> float:
        return self.spec.lattice.grid.h

    @property
    def path_weights(self) -> np.ndarray:
        tgrid, grid = self.spec.lattice.tgrid, self.spec.lattice.grid
        return path_metric(tgrid, grid, 2, tgrid.steps)

    @property
    def control_weights(self) -> np.ndarray:
        tgrid, grid = self.spec.lattice.tgrid, self.spec.lattice.grid
        return path_metric(tgrid, grid, 1, tgrid.steps)

    # column groups of ``forward``: [y0 | f | g]
    @property
    def y0_cols(self) -> slice:
        return slice(0, self.block)

    @property
    def drift_cols(self) -> slice:
        return slice(self.block, self.block + self.path_layout.size)

    @property
    def noise_cols(self) -> slice:
        return slice(self.block + self.path_layout.size, self.block + 2 * self.path_layout.size)

    @property
    def path_rows(self) -> slice:
        return slice(0, self.path_layout.size)

    @property
    def terminal_rows(self) -> slice:
        return slice(self.path_layout.size, self.state_layout.size)

    # column groups of the backward maps: [z_T | F]
    @property
    def terminal_cols(self) -> slice:
        return slice(0, self.n_terminal)

    @property
    def source_cols(self) -> slice:
        return slice(self.n_terminal, self.n_terminal + self.path_layout.size)

    @cached_property
    def observation(self) -> np.ndarray:
        """Diagonal of χ_{O_d} times the observed-component indicator on a path field."""
        spec = self.spec
        return _per_space(spec, np.outer(spec.observed, spec.layout.mask_od))

    @cached_property
    def embeddings(self) -> tuple[np.ndarray, ...]:
        return tuple(embedding(self.spec, mask) for mask in self.spec.layout.masks_gi)

    @cached_property
    def leader_embedding(self) -> np.ndarray:
        return embedding(self.spec, self.spec.layout.mask_g0)

    @cached_property
    def extractors(self) -> tuple[np.ndarray, np.ndarray]:
        ones = np.ones(self.spec.lattice.grid.n_x)
        return embedding(self.spec, ones, 0).T, embedding(self.spec, ones, 1).T

    @cached_property
    def lambdas(self) -> tuple[np.ndarray, ...]:
        """Λ_i as state-field matrices."""
        return tuple(self.forward[:, self.drift_cols] @ emb for emb in self.embeddings)

    @cached_property
    def lambda_adjoints(self) -> tuple[np.ndarray, ...]:
        """Λ_i* X = χ_{G_i} w₁ for the backward sweep with F = -X."""
        minus_source = -self.backward_path[:, self.source_cols]
        return tuple(emb.T @ minus_source for emb in self.embeddings)

    @cached_property
    def supports(self) -> tuple[np.ndarray, ...]:
        """Flat indices of admissible control entries of every follower."""
        spec = self.spec
        admissible = _per_time(spec, 1, spec.admissible.astype(float)) > 0
        return tuple(
            np.flatnonzero(admissible & (_per_space(spec, mask[None, :]) != 0))
            for mask in spec.layout.masks_gi
        )

    @cached_property
    def nash_operator(self) -> np.ndarray:
        """𝓛 restricted to the supports: α_i Λ_i* O Λ_j + δ_ij β_i ρ*²."""
        spec = self.spec
        penalty = _per_time(spec, 1, np.where(spec.admissible, spec.penalty_weight, 0.0))
        rows = []
        for i in range(spec.followers):
            row = []
            for j in range(spec.followers):
                observed = self.observation[:, None] * self.lambdas[j][self.path_rows]
                block = spec.alpha[i] * self.lambda_adjoints[i] @ observed
                if i == j:
                    block = block + spec.beta[i] * np.diag(penalty)
                row.append(block[np.ix_(self.supports[i], self.supports[j])])
            rows.append(row)
        return np.block(rows)

    @cached_property
    def nash_factor(self) -> tuple[np.ndarray, np.ndarray]:
        check_coercive(self)
        return scipy.linalg.lu_factor(self.nash_operator)

    def nash_rhs(self, q_path: np.ndarray) -> np.ndarray:
        spec = self.spec
        parts = []
        for i in range(spec.followers):
            misfit = self.observation * (spec.targets[i].flatten() - q_path)
            parts.append((spec.alpha[i] * self.lambda_adjoints[i] @ misfit)[self.supports[i]])
        return np.concatenate(parts)

    def expand(self, restricted: np.ndarray) -> list[np.ndarray]:
        """Split a stacked restricted vector into full 1-component path vectors."""
        out, start = [], 0
        for support in self.supports:
            full = np.zeros(self.path_layout.size // 2)
            full[support] = restricted[start : start + support.size]
            out.append(full)
            start += support.size
        return out

    @cached_property
    def leader_to_inputs(self) -> np.ndarray:
        """(u₁, u₂, u₃) -> forward input columns [f | g]."""
        e1, e2 = self.extractors
        drift = np.hstack([self.leader_embedding, np.zeros_like(e1.T), np.zeros_like(e2.T)])
        noise = np.hstack([np.zeros_like(e1.T), e1.T, e2.T])
        return np.vstack([drift, noise])

    @cached_property
    def control_to_terminal(self) -> np.ndarray:
        """Closed-loop y(T) from y⁰ = 0, y_d = 0 as a function of the leader triple."""
        sources = slice(self.drift_cols.start, self.noise_cols.stop)
        direct = self.forward[:, sources] @ self.leader_to_inputs
        q_path = direct[self.path_rows]
        observed = self.observation[:, None] * q_path
        rhs = np.vstack(
            [
                (-self.spec.alpha[i] * self.lambda_adjoints[i] @ observed)[self.supports[i]]
                for i in range(self.spec.followers)
            ]
        )
        followers = scipy.linalg.lu_solve(self.nash_factor, rhs)
        terminal = direct[self.terminal_rows].copy()
        start = 0
        for i, support in enumerate(self.supports):
            response = self.lambdas[i][self.terminal_rows][:, support]
            terminal += response @ followers[start : start + support.size]
            start += support.size
        return terminal

    @cached_property
    def coupled_maps(self) -> dict[str, np.ndarray]:
        """φ path, Φ, φ(0) and every ψ^i state as matrices acting on φᵀ."""
        spec = self.spec
        e1, _ = self.extractors
        feedback = _per_time(spec, 1, spec.feedback_weight)
        psi_drivers = [
            self.lambdas[i] @ ((feedback / spec.beta[i])[:, None] * e1) for i in range(spec.followers)
        ]
        coupling = sum(spec.alpha[i] * psi_drivers[i][self.path_rows] for i in range(spec.followers))
        source_map = self.backward_path[:, self.source_cols] @ (self.observation[:, None] * coupling)
        identity = np.eye(source_map.shape[0])
        try:
            path = scipy.linalg.solve(identity - source_map, self.backward_path[:, self.terminal_cols])
        except np.linalg.LinAlgError as e:
            raise SolverError(f"dense coupled adjoint system is singular: {e}; increase beta_i") from e
        drift = self.observation[:, None] * (coupling @ path)
        return {
            "path": path,
            "martingale": self.backward_martingale[:, self.terminal_cols]
            + self.backward_martingale[:, self.source_cols] @ drift,
            "initial": self.backward_initial[:, self.terminal_cols]
            + self.backward_initial[:, self.source_cols] @ drift,
            **{f"psi_{i}": driver @ path for i, driver in enumerate(psi_drivers)},
        }

    @cached_property
    def leader_map(self) -> np.ndarray:
        """φᵀ -> (χ_{G_0}φ₁, Φ₁, Φ₂)."""
        e1, e2 = self.extractors
        maps = self.coupled_maps
        return np.vstack(
            [self.leader_embedding.T @ maps["path"], e1 @ maps["martingale"], e2 @ maps["martingale"]]
        )

    @cached_property
    def gramian(self) -> np.ndarray:
        return self.control_to_terminal @ self.leader_map

    @cached_property
    def gramian_spectrum(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.gramian
        return scipy.linalg.eigh(0.5 * (g + g.T))


@dataclass(frozen=True, eq=False)
class DenseHumSolution:
    phi_t: np.ndarray
    leaders: np.ndarray
    terminal: np.ndarray
    terminal_norm: float
    predicted_terminal_norm: float
    control_energy: float
    free_terminal: np.ndarray
    epsilon: float


def _forward_matrix(spec: GameSpec, state: FieldLayout, path: FieldLayout) -> np.ndarray:
    lattice, coeffs = spec.lattice, spec.coeffs
    tgrid = lattice.tgrid
    dt, block = tgrid.dt, 2 * lattice.grid.n_x
    smoother = np.kron(np.eye(2), scipy.linalg.inv(lattice.stencil.implicit_dense()))
    n_in = block + 2 * path.size
    drift_start, noise_start = block, block + path.size
    y = np.zeros((block, n_in))
    y[:, :block] = np.eye(block)
    rows = [y]
    for m in range(tgrid.steps):
        level = tgrid.level(m)
        nodes = 2**level
        pre = np.kron(np.eye(nodes), pointwise_dense(coeffs.step_matrix(m, dt))) @ y
        cols = path.block(m)
        pre[:, drift_start + cols.start : drift_start + cols.stop] += dt * np.eye(nodes * block)
        pre = np.kron(np.eye(nodes), smoother) @ pre
        if tgrid.level(m + 1) > level:
            spread = branch_dense(nodes, block)
            y = spread @ pre
            kick = np.kron(np.diag(lattice.tree.increments(level)), np.eye(block)) @ spread
            for r in range(m + 1 - tgrid.substeps, m + 1):
                cols = path.block(r)
                y[:, noise_start + cols.start : noise_start + cols.stop] += kick / tgrid.substeps
        else:
            y = pre
        rows.append(y)
    return np.vstack(rows)


def _backward_matrices(
    spec: GameSpec, state: FieldLayout, path: FieldLayout
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lattice, coeffs = spec.lattice, spec.coeffs
    tgrid = lattice.tgrid
    dt, block = tgrid.dt, 2 * lattice.grid.n_x
    smoother = np.kron(np.eye(2), scipy.linalg.inv(lattice.stencil.implicit_dense()))
    n_term = state.sizes[-1]
    z = np.zeros((n_term, n_term + path.size))
    z[:, :n_term] = np.eye(n_term)
    w_rows: list[np.ndarray] = [np.empty(0)] * tgrid.steps
    z_rows: list[np.ndarray] = [np.empty(0)] * tgrid.steps
    held = None
    for m in range(tgrid.steps - 1, -1, -1):
        level = tgrid.level(m)
        nodes = 2**level
        if tgrid.level(m + 1) > level:
            z_hat = 0.5 * branch_dense(nodes, block).T @ z
            difference = np.kron(np.kron(np.eye(nodes), [[1.0, -1.0]]), np.eye(block))
            held = difference @ z / (2.0 * lattice.tree.sqrt_dtw)
        else:
            z_hat = z
        w = np.kron(np.eye(nodes), smoother) @ z_hat
        z = np.kron(np.eye(nodes), pointwise_dense(coeffs.step_matrix(m, dt)).T) @ w
        cols = path.block(m)
        z[:, n_term + cols.start : n_term + cols.stop] -= dt * np.eye(nodes * block)
        w_rows[m], z_rows[m] = w, held
    return np.vstack(w_rows), np.vstack(z_rows), z


def assemble(spec: GameSpec, cap: int = DEFAULT_DENSE_CAP) -> DenseInstance:
    """Dense forward and backward maps of the lattice of ``spec``."""
    state = FieldLayout.of(spec, 2, spec.lattice.tgrid.steps + 1)
    path = FieldLayout.of(spec, 2, spec.lattice.tgrid.steps)
    unknowns = state.size + 2 * path.size
    if unknowns > cap:
        logger.error("dense instance needs %s unknowns, cap is %s", unknowns, cap)
        raise ValidationError(f"dense oracle needs {unknowns} unknowns, above the cap of {cap}")
    logger.info("assembling dense instance with %s unknowns", unknowns)
    forward = _forward_matrix(spec, state, path)
    backward_path, backward_martingale, backward_initial = _backward_matrices(spec, state, path)
    return DenseInstance(
        spec=spec,
        state_layout=state,
        path_layout=path,
        forward=forward,
        backward_path=backward_path,
        backward_martingale=backward_martingale,
        backward_initial=backward_initial,
    )


def _relative_gap(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b)) / scale)


def metric_transpose_deviation(instance: DenseInstance) -> float:
    """Worst relative entry gap between the backward maps and the metric adjoints of the forward map."""
    fwd = instance.forward
    w_p = instance.path_weights
    c_t, c_0 = instance.terminal_weight, instance.initial_weight
    path, term = instance.path_rows, instance.terminal_rows
    expected = {
        "path_terminal": (fwd[term, instance.drift_cols].T * c_t) / w_p[:, None],
        "path_source": -(fwd[path, instance.drift_cols].T * w_p[None, :]) / w_p[:, None],
        "martingale_terminal": (fwd[term, instance.noise_cols].T * c_t) / w_p[:, None],
        "martingale_source": -(fwd[path, instance.noise_cols].T * w_p[None, :]) / w_p[:, None],
        "initial_terminal": fwd[term, instance.y0_cols].T * c_t / c_0,
        "initial_source": -(fwd[path, instance.y0_cols].T * w_p[None, :]) / c_0,
    }
    actual = {
        "path_terminal": instance.backward_path[:, instance.terminal_cols],
        "path_source": instance.backward_path[:, instance.source_cols],
        "martingale_terminal": instance.backward_martingale[:, instance.terminal_cols],
        "martingale_source": instance.backward_martingale[:, instance.source_cols],
        "initial_terminal": instance.backward_initial[:, instance.terminal_cols],
        "initial_source": instance.backward_initial[:, instance.source_cols],
    }
    gaps = {name: _relative_gap(expected[name], actual[name]) for name in expected}
    logger.debug("metric transposition gaps: %s", gaps)
    return max(gaps.values())


def probe_deviation(instance: DenseInstance, rng: np.random.Generator, n_probes: int = 20) -> float:
    """Worst relative gap between the dense maps and forward_sweep / backward_sweep on random data."""
    spec = instance.spec
    lattice, coeffs = spec.lattice, spec.coeffs
    like_path = lattice.path_zeros(2)
    worst = 0.0
    for _ in range(n_probes):
        y0 = rng.standard_normal(instance.block)
        drift = rng.standard_normal(instance.path_layout.size)
        noise = rng.standard_normal(instance.path_layout.size)
        src = SourceSpec(drift=like_path.unflatten(drift), noise=like_path.unflatten(noise))
        iterative = forward_sweep(y0.reshape(1, 2, -1), lattice, coeffs, src).flatten()
        dense = instance.forward @ np.concatenate([y0, drift, noise])
        worst = max(worst, _relative_gap(iterative, dense))

        terminal = rng.standard_normal(instance.n_terminal)
        source = rng.standard_normal(instance.path_layout.size)
        adjoint = backward_sweep(
            terminal.reshape(lattice.terminal_zeros(2).shape), lattice, coeffs, like_path.unflatten(source)
        )
        data = np.concatenate([terminal, source])
        worst = max(
            worst,
            _relative_gap(adjoint.path.flatten(), instance.backward_path @ data),
            _relative_gap(adjoint.martingale.flatten(), instance.backward_martingale @ data),
            _relative_gap(adjoint.initial.ravel(), instance.backward_initial @ data),
        )
    return worst


def check_coercive(instance: DenseInstance) -> float:
    """Smallest eigenvalue of the metric-symmetrized 𝓛; raises when it is not positive."""
    weights = np.concatenate([instance.control_weights[s] for s in instance.supports])
    weighted = weights[:, None] * instance.nash_operator
    smallest = float(scipy.linalg.eigvalsh(0.5 * (weighted + weighted.T))[0])
    if smallest <= 0:
        logger.error("symmetric part of the Nash operator is not positive definite: %s", smallest)
        raise SolverError(
            f"Nash operator is not coercive (smallest eigenvalue {smallest:.3e}); increase beta_i"
        )
    return smallest


def _dense_inputs(instance: DenseInstance, y0: np.ndarray, leaders: LeaderControls) -> np.ndarray:
    spec = instance.spec
    drift = SourceSpec(localized=(LocalizedSource(spec.layout.mask_g0, leaders.u1),)).drift_field(spec.lattice)
    return np.concatenate([np.ravel(y0), drift.flatten(), leaders.noise_field().flatten()])


def _solve_followers(instance: DenseInstance, q_path: np.ndarray) -> tuple[list[np.ndarray], float]:
    rhs = instance.nash_rhs(q_path)
    restricted = scipy.linalg.lu_solve(instance.nash_factor, rhs)
    residual = np.linalg.norm(instance.nash_operator @ restricted - rhs) / max(np.linalg.norm(rhs), 1.0)
    return instance.expand(restricted), float(residual)


def solve_dense_nash(instance: DenseInstance, y0: np.ndarray, leaders: LeaderControls) -> NashSolution:
    """Direct solve of 𝓛v = (α_i Λ_i*[(y_d^i - q) χ_{O_d}])_i."""
    spec = instance.spec
    q = instance.forward @ _dense_inputs(instance, y0, leaders)
    followers, residual = _solve_followers(instance, q[instance.path_rows])
    like = spec.lattice.path_zeros(1)
    return NashSolution(
        v_star=FollowerControls(tuple(like.unflatten(v) for v in followers)),
        residuals=(residual,) * spec.followers,
        method=NashMethod.DENSE_ORACLE,
        iterations=1,
        contraction=0.0,
    )


def solve_dense_coupled_adjoint(instance: DenseInstance, phi_t: np.ndarray) -> dict[str, np.ndarray]:
    """Flattened φ path, Φ, φ(0) and ψ^i states for one terminal datum."""
    vector = np.ravel(phi_t)
    return {name: matrix @ vector for name, matrix in instance.coupled_maps.items()}


def free_terminal(instance: DenseInstance, y0: np.ndarray) -> np.ndarray:
    """y(T) of the closed loop with the leaders switched off."""
    inputs = np.zeros(instance.forward.shape[1])
    inputs[instance.y0_cols] = np.ravel(y0)
    q = instance.forward @ inputs
    followers, _ = _solve_followers(instance, q[instance.path_rows])
    terminal = q[instance.terminal_rows]
    for lam, v in zip(instance.lambdas, followers):
        terminal = terminal + lam[instance.terminal_rows] @ v
    return terminal


def solve_dense_hum(instance: DenseInstance, y0: np.ndarray, epsilon: float) -> DenseHumSolution:
    """(G + εI)φᵀ = -b through the eigendecomposition of the symmetrized Gramian."""
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    b = free_terminal(instance, y0)
    eigenvalues, vectors = instance.gramian_spectrum
    b_hat = vectors.T @ b
    phi_t = -vectors @ (b_hat / (eigenvalues + epsilon))
    terminal = b + instance.gramian @ phi_t
    c_t = instance.terminal_weight
    predicted = np.sqrt(c_t * np.sum((epsilon / (eigenvalues + epsilon)) ** 2 * b_hat**2))
    leaders = instance.leader_map @ phi_t
    weights = np.tile(instance.control_weights, 3)
    return DenseHumSolution(
        phi_t=phi_t,
        leaders=leaders,
        terminal=terminal,
        terminal_norm=float(np.sqrt(c_t * terminal @ terminal)),
        predicted_terminal_norm=float(predicted),
        control_energy=float(np.sum(weights * leaders**2)),
        free_terminal=b,
        epsilon=epsilon,
    )


def gramian_symmetry_deviation(instance: DenseInstance) -> float:
    """max |G - Gᵀ| over max |G|, and the gap to c_T C W_U⁻¹ Cᵀ."""
    g = instance.gramian
    weights = np.tile(instance.control_weights, 3)
    c = instance.control_to_terminal
    duality_form = instance.terminal_weight * (c / weights[None, :]) @ c.T
    return max(_relative_gap(g, g.T), _relative_gap(g, duality_form))


def weak_direction_fraction(instance: DenseInstance, y0: np.ndarray, threshold: float) -> float:
    """Share of ‖y_free(T)‖² carried by Gramian eigenvalues below ``threshold``.

    Along an eigenvalue λ the penalized leader leaves ε/(λ + ε) of the free terminal state, so
    mass on λ ≪ ε does not decay with ε.
    """
    b = free_terminal(instance, y0)
    eigenvalues, vectors = instance.gramian_spectrum
    b_hat = vectors.T @ b
    total = float(b_hat @ b_hat)
    if total == 0.0:
        return 0.0
    weak = eigenvalues < threshold
    return float(b_hat[weak] @ b_hat[weak] / total)


def spectral_sweep_slope(instance: DenseInstance, y0: np.ndarray, eps_list: list[float]) -> float:
    """Log-log slope of the terminal norms the Gramian spectrum predicts along ``eps_list``."""
    b = free_terminal(instance, y0)
    eigenvalues, vectors = instance.gramian_spectrum
    b_hat = vectors.T @ b
    norms = [np.sqrt(np.sum((eps / (eigenvalues + eps)) ** 2 * b_hat**2)) for eps in eps_list]
    return float(np.polyfit(np.log(eps_list), np.log(norms), 1)[0])
