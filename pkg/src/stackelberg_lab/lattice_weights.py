"""Space, time and subdomain discretization plus the Carleman weight families.

Weights are kept in log space. Consumers exponentiate through ``clamped_exp`` which
caps the exponent at ``log_cap`` and counts how often the cap was hit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from stackelberg_lab import ValidationError, WeightOverflowError, logger

if TYPE_CHECKING:
    from stackelberg_lab.noise_tree import AdaptedField

DEFAULT_LOG_CAP = 700.0


@dataclass(frozen=True)
class SpatialGrid:
    """Interior nodes x_j = j*h, j = 1..n_x, of (0, L) with Dirichlet boundary."""

    length: float
    n_x: int

    def __post_init__(self) -> None:
        if self.n_x < 3:
            raise ValidationError(f"n_x must be at least 3, got {self.n_x}")
        if not self.length > 0:
            raise ValidationError(f"domain length must be positive, got {self.length}")

    @property
    def h(self) -> float:
        return self.length / (self.n_x + 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(1, self.n_x + 1)

    def laplacian_eigenvalue(self, k: int = 1) -> float:
        """Eigenvalue of -Δ_h for the mode sin(kπx/L)."""
        return 4.0 * np.sin(k * np.pi * self.h / (2.0 * self.length)) ** 2 / self.h**2

    def mode(self, k: int = 1) -> np.ndarray:
        return np.sin(k * np.pi * self.nodes / self.length)

    def interval_mask(self, start: float, end: float) -> np.ndarray:
        """Indicator of the nodes with start <= x_j <= end."""
        if end < start:
            raise ValidationError(f"interval {start}:{end} has end before start")
        tol = 1e-12 * self.length
        x = self.nodes
        return (x >= start - tol) & (x <= end + tol)


@dataclass(frozen=True)
class TimeGrid:
    """PDE clock m = 0..M with M = K*R and a noise increment every R sub-steps."""

    horizon: float
    noise_levels: int
    substeps: int = 1

    def __post_init__(self) -> None:
        if self.noise_levels < 1 or self.substeps < 1:
            raise ValidationError(
                f"noise_levels and substeps must be >= 1, got {self.noise_levels}, {self.substeps}"
            )
        if not self.horizon > 0:
            raise ValidationError(f"horizon must be positive, got {self.horizon}")
        if abs(self.dt * self.steps - self.horizon) > 2 * np.finfo(float).eps * self.horizon:
            raise ValidationError(
                f"dt*K*R does not reproduce T={self.horizon} for K={self.noise_levels}, R={self.substeps}"
            )

    @property
    def steps(self) -> int:
        return self.noise_levels * self.substeps

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def dtw(self) -> float:
        return self.horizon / self.noise_levels

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    @property
    def interior_times(self) -> np.ndarray:
        return self.times[1:-1]

    def level(self, m: int) -> int:
        """Tree level k(m) = min(m // R, K) carrying the field at time index m."""
        return min(m // self.substeps, self.noise_levels)

    def is_noise_boundary(self, m: int) -> bool:
        """True when the step m -> m+1 closes a noise interval."""
        return (m + 1) % self.substeps == 0


@dataclass(frozen=True)
class SubdomainLayout:
    """Node indicators of G_0, G_1..G_m, O_d and O_0."""

    mask_g0: np.ndarray
    masks_gi: tuple[np.ndarray, ...]
    mask_od: np.ndarray
    mask_o0: np.ndarray

    def __post_init__(self) -> None:
        named = [("G_0", self.mask_g0), ("O_d", self.mask_od), ("O_0", self.mask_o0)]
        named += [(f"G_{i + 1}", mask) for i, mask in enumerate(self.masks_gi)]
        n_x = self.mask_g0.shape[0]
        for name, mask in named:
            if mask.dtype != bool or mask.shape != (n_x,):
                raise ValidationError(f"{name} must be a boolean mask over {n_x} nodes")
            if not mask.any():
                raise ValidationError(f"{name} is empty on this grid")
        if not self.masks_gi:
            raise ValidationError("at least one follower region G_i is required")
        for i, mask in enumerate(self.masks_gi):
            if (self.mask_g0 & mask).any():
                raise ValidationError(f"G_0 ∩ G_i = ∅ violated for follower {i + 1}")
        if not (self.mask_g0 & self.mask_od).any():
            raise ValidationError("G_0 ∩ O_d ≠ ∅ violated")
        if (self.mask_o0 & ~(self.mask_g0 & self.mask_od)).any():
            raise ValidationError("O_0 ⊂ G_0 ∩ O_d violated")

    @classmethod
    def from_intervals(
        cls,
        grid: SpatialGrid,
        g0: tuple[float, float],
        gi: list[tuple[float, float]],
        od: tuple[float, float],
        o0: tuple[float, float],
    ) -> SubdomainLayout:
        return cls(
            mask_g0=grid.interval_mask(*g0),
            masks_gi=tuple(grid.interval_mask(*interval) for interval in gi),
            mask_od=grid.interval_mask(*od),
            mask_o0=grid.interval_mask(*o0),
        )

    @property
    def followers(self) -> int:
        return len(self.masks_gi)


@dataclass(frozen=True)
class WeightParams:
    lam: float
    mu: float
    eta0: np.ndarray
    eta0_max: float
    critical_mask: np.ndarray


def build_eta0(
    grid: SpatialGrid, layout: SubdomainLayout, lam: float = 0.1, mu: float = 0.5
) -> WeightParams:
    """Parabola 4x(L-x)/L², positive inside, zero on the boundary, critical only at L/2.

    The node nearest to L/2 must belong to O_0 so that |η₀'| > 0 outside O_0.
    """
    if lam < 0 or mu < 0:
        raise ValidationError(f"Carleman parameters must be >= 0, got lambda={lam}, mu={mu}")
    x = grid.nodes
    midpoint = int(np.argmin(np.abs(x - grid.length / 2)))
    if not layout.mask_o0[midpoint]:
        logger.error("O_0 misses the midpoint node x=%s", x[midpoint])
        raise ValidationError(
            f"O_0 must contain the domain midpoint node x={x[midpoint]:.6g} (critical point of η₀)"
        )
    eta0 = 4.0 * x * (grid.length - x) / grid.length**2
    # one-sided slopes with the boundary zeros attached
    padded = np.concatenate(([0.0], eta0, [0.0]))
    slope = np.maximum(np.abs(np.diff(padded))[:-1], np.abs(np.diff(padded))[1:])
    flat = (slope <= 1e-14) & ~layout.mask_o0
    if flat.any():
        raise ValidationError(f"|η₀'| vanishes outside O_0 at x={x[flat]}")
    return WeightParams(
        lam=lam, mu=mu, eta0=eta0, eta0_max=1.0, critical_mask=layout.mask_o0.copy()
    )


def ell(t: np.ndarray | float, horizon: float) -> np.ndarray:
    """ℓ(t) = T²/4 on [0, T/2] and t(T-t) on [T/2, T]."""
    t = np.asarray(t, dtype=float)
    return np.where(t <= horizon / 2, horizon * horizon / 4, t * (horizon - t))


def clamped_exp(log_values: np.ndarray, log_cap: float) -> tuple[np.ndarray, int]:
    """exp with the exponent clipped to [-log_cap, log_cap]; returns the clamp count."""
    log_values = np.asarray(log_values, dtype=float)
    clamped = int(np.count_nonzero(np.abs(log_values) > log_cap))
    return np.exp(np.clip(log_values, -log_cap, log_cap)), clamped


@dataclass(frozen=True)
class WeightTables:
    """Log-space weights at the interior PDE times t_1..t_{M-1}.

    ``log_theta`` and ``log_theta_bar`` carry the boundary nodes x=0 and x=L as their
    first and last columns so gradient terms can be weighted on edges.
    """

    lam: float
    mu: float
    horizon: float
    times: np.ndarray
    gamma: np.ndarray
    ell: np.ndarray
    alpha_star: np.ndarray
    log_rho_star: np.ndarray
    log_rho_bar: np.ndarray
    log_theta: np.ndarray
    log_theta_bar: np.ndarray
    eta_profile: np.ndarray
    eta0_max: float = 1.0
    log_cap: float = DEFAULT_LOG_CAP
    clamp_fraction: float = 0.0
    scaling: bool = True

    def _path_exp(self, log_interior: np.ndarray, at_zero: float) -> np.ndarray:
        values, clamped = clamped_exp(log_interior, self.log_cap)
        if clamped:
            logger.warning("%s weight exponentials clamped at log_cap=%s", clamped, self.log_cap)
        return np.concatenate(([at_zero], values))

    def rho_star_inv_sq_path(self) -> np.ndarray:
        """ρ*⁻² at path times m = 0..M-1, with the value 0 at t = 0."""
        return self._path_exp(-2.0 * self.log_rho_star, 0.0)

    def rho_star_sq_path(self) -> np.ndarray:
        """ρ*² at path times m = 0..M-1; infinite at t = 0 (inadmissible control time)."""
        return self._path_exp(2.0 * self.log_rho_star, np.inf)

    def rho_bar_sq_path(self) -> np.ndarray:
        """ρ² at path times m = 0..M-1; ℓ is constant near t = 0 so ρ(0) is finite."""
        at_zero, _ = clamped_exp(2.0 * self._log_rho_bar_at_zero(), self.log_cap)
        return self._path_exp(2.0 * self.log_rho_bar, float(at_zero))

    def rho_bar_inv_sq_path(self) -> np.ndarray:
        at_zero, _ = clamped_exp(-2.0 * self._log_rho_bar_at_zero(), self.log_cap)
        return self._path_exp(-2.0 * self.log_rho_bar, float(at_zero))

    def _log_rho_bar_at_zero(self) -> float:
        if not self.scaling:
            return 0.0
        return -self.lam * (1.0 - np.exp(2.0 * self.mu * self.eta0_max)) / (self.horizon**2 / 4)

    @property
    def rho0(self) -> float:
        """min over interior times of ρ*."""
        return float(np.exp(np.min(self.log_rho_star)))


def build_weight_tables(
    params: WeightParams,
    tgrid: TimeGrid,
    log_cap: float = DEFAULT_LOG_CAP,
    clamp_fraction: float = 0.0,
) -> WeightTables:
    if tgrid.steps < 2:
        raise ValidationError("weight tables need at least one interior time node (K*R >= 2)")
    lam, mu, horizon = params.lam, params.mu, tgrid.horizon
    t = tgrid.interior_times
    gamma = 1.0 / (t * (horizon - t))
    ell_t = ell(t, horizon)
    top = np.exp(2.0 * mu * params.eta0_max)
    alpha_star = (1.0 - top) * gamma
    alpha_bar_star = (1.0 - top) / ell_t
    eta_full = np.concatenate(([0.0], params.eta0, [0.0]))
    spatial = np.exp(mu * eta_full) - top
    return WeightTables(
        lam=lam,
        mu=mu,
        horizon=horizon,
        times=t,
        gamma=gamma,
        ell=ell_t,
        alpha_star=alpha_star,
        log_rho_star=-lam * alpha_star / 2.0,
        log_rho_bar=-lam * alpha_bar_star,
        log_theta=lam * np.outer(gamma, spatial),
        log_theta_bar=lam * np.outer(1.0 / ell_t, spatial),
        eta_profile=eta_full,
        eta0_max=params.eta0_max,
        log_cap=log_cap,
        clamp_fraction=clamp_fraction,
        scaling=lam > 0,
    )


@dataclass(frozen=True)
class InequalityReport:
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    ell_jump: float
    rho_bound_ok: bool
    rho_star_monotone: bool
    rho_bar_profile_ok: bool

    @property
    def passed(self) -> bool:
        return bool(np.all(np.isfinite([self.c1, self.c2, self.c3, self.c4, self.c5])))

    def rows(self) -> list[dict[str, float]]:
        return [
            {"constant": name, "value": float(getattr(self, name))}
            for name in ("c1", "c2", "c3", "c4", "c5", "ell_jump")
        ]


def check_weight_inequalities(tables: WeightTables, tgrid: TimeGrid) -> InequalityReport:
    """Empirical constants of |γ'| <= Cγ², |γ''| <= Cγ³ and the α_t, α_tt bounds."""
    if tgrid.steps < 8:
        raise ValidationError(f"weight inequality check needs K*R >= 8 time nodes, got {tgrid.steps}")
    dt = tgrid.dt
    gamma = tables.gamma
    top = np.exp(2.0 * tables.mu * tables.eta0_max)
    mid_gamma = gamma[1:-1]
    d_gamma = (gamma[2:] - gamma[:-2]) / (2 * dt)
    dd_gamma = (gamma[2:] - 2 * gamma[1:-1] + gamma[:-2]) / dt**2
    # α(t, x) = (e^{μη₀(x)} - e^{2μ|η₀|∞}) γ(t)
    spatial = np.max(np.abs(np.exp(tables.mu * tables.eta_profile) - top))
    c4 = float(np.max(spatial * np.abs(d_gamma) / (top * mid_gamma**2)))
    c5 = float(np.max(spatial * np.abs(dd_gamma) / (top * mid_gamma**3)))

    half = tgrid.horizon / 2
    ell_jump = abs(float(ell(half, tgrid.horizon)) - half * (tgrid.horizon - half))

    # ρ*⁻⁴ <= θ̄² at every x: -4 log ρ* <= 2 λ ᾱ(t, x)
    rho_bound_ok = bool(
        np.all(-4.0 * tables.log_rho_star[:, None] <= 2.0 * tables.log_theta_bar + 1e-12 * (1 + np.abs(tables.log_theta_bar)))
    )

    log_rs = tables.log_rho_star
    log_rb = tables.log_rho_bar
    if tables.scaling and tables.mu > 0:
        left = tables.times <= half
        right = tables.times >= half
        rho_star_monotone = bool(
            np.all(np.diff(log_rs[left]) < 0) and np.all(np.diff(log_rs[right]) > 0)
        )
        rho_bar_profile_ok = bool(
            np.ptp(log_rb[left]) == 0 and np.all(np.diff(log_rb[right]) > 0)
        )
    else:
        rho_star_monotone = bool(np.all(log_rs == 0))
        rho_bar_profile_ok = bool(np.all(log_rb == 0))

    return InequalityReport(
        c1=float(np.min(gamma)),
        c2=float(np.max(np.abs(d_gamma) / mid_gamma**2)),
        c3=float(np.max(np.abs(dd_gamma) / mid_gamma**3)),
        c4=c4,
        c5=c5,
        ell_jump=ell_jump,
        rho_bound_ok=rho_bound_ok,
        rho_star_monotone=rho_star_monotone,
        rho_bar_profile_ok=rho_bar_profile_ok,
    )


def _weighted_exp(log_values: np.ndarray, tables: WeightTables, counter: list[int]) -> np.ndarray:
    values, clamped = clamped_exp(log_values, tables.log_cap)
    counter[0] += clamped
    counter[1] += log_values.size
    return values


def _check_clamping(counter: list[int], tables: WeightTables) -> None:
    clamped, total = counter
    if not clamped:
        return
    fraction = clamped / max(total, 1)
    logger.warning("weight clamp activated on %s of %s nodes", clamped, total)
    if fraction > tables.clamp_fraction:
        logger.error("clamp fraction %s exceeds limit %s", fraction, tables.clamp_fraction)
        raise WeightOverflowError(
            f"weight clamp activated on {fraction:.3%} of nodes (limit {tables.clamp_fraction:.3%}); "
            "lower lambda or mu"
        )


def carleman_energy(
    d: int,
    values: AdaptedField,
    tables: WeightTables,
    grid: SpatialGrid,
    tgrid: TimeGrid,
    variant: str = "standard",
    window: tuple[float, float] | None = None,
) -> float:
    """Weighted energy λ^d θ²γ^d z² + λ^{d-2} θ²γ^{d-2}|∇z|² summed over interior times.

    ``variant="bar"`` uses θ̄ and γ̄ = 1/ℓ without λ powers, restricted to ``window``
    (defaults to the whole interval). Gradients are edge differences with zero boundary
    values and the edge weight is the geometric mean of the two node weights. λ = 0 turns
    every weight into 1.
    """
    if variant not in ("standard", "bar"):
        raise ValidationError(f"unknown Carleman energy variant {variant!r}")
    t1, t2 = window if window is not None else (0.0, tgrid.horizon)
    counter = [0, 0]
    total = 0.0
    for i, t in enumerate(tables.times):
        if not (t1 <= t < t2):
            continue
        m = i + 1
        arr = values.values[m]
        k = tgrid.level(m)
        if variant == "standard":
            log_t2 = 2.0 * tables.log_theta[i]
            g = tables.gamma[i]
            lam_d, lam_d2 = (tables.lam**d, tables.lam ** (d - 2)) if tables.scaling else (1.0, 1.0)
        else:
            log_t2 = 2.0 * tables.log_theta_bar[i]
            g = 1.0 / tables.ell[i]
            lam_d = lam_d2 = 1.0
        if tables.scaling:
            node_w = _weighted_exp(log_t2[1:-1], tables, counter) * g**d * lam_d
            edge_w = _weighted_exp(0.5 * (log_t2[:-1] + log_t2[1:]), tables, counter) * g ** (d - 2) * lam_d2
        else:
            node_w = np.ones(grid.n_x)
            edge_w = np.ones(grid.n_x + 1)
        padded = np.pad(arr, [(0, 0), (0, 0), (1, 1)])
        grad = np.diff(padded, axis=-1) / grid.h
        per_node = np.sum(arr**2 * node_w, axis=(1, 2)) + np.sum(grad**2 * edge_w, axis=(1, 2))
        total += tgrid.dt * grid.h * np.sum(per_node) / 2**k
    _check_clamping(counter, tables)
    return float(total)


def localized_energy(
    d: int,
    values: AdaptedField,
    tables: WeightTables,
    grid: SpatialGrid,
    tgrid: TimeGrid,
    mask: np.ndarray,
) -> float:
    """λ^d E∬_B θ²γ^d z² over the nodes of ``mask``."""
    counter = [0, 0]
    total = 0.0
    for i in range(len(tables.times)):
        m = i + 1
        arr = values.values[m]
        if tables.scaling:
            w = _weighted_exp(2.0 * tables.log_theta[i][1:-1], tables, counter)
            w = w * tables.gamma[i] ** d * tables.lam**d
        else:
            w = np.ones(grid.n_x)
        total += tgrid.dt * grid.h * np.sum(arr**2 * (w * mask)) / 2 ** tgrid.level(m)
    _check_clamping(counter, tables)
    return float(total)
