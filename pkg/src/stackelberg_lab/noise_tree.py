"""Binomial noise tree and adapted space-time fields living on it.

Node ``p`` at level k has children ``2p`` (increment +√dtW) and ``2p+1`` (increment
-√dtW) at level k+1, so the binary digits of a leaf index spell its noise path.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from stackelberg_lab import ValidationError, logger
from stackelberg_lab.lattice_weights import SpatialGrid, TimeGrid

DEFAULT_MAX_LEVELS = 12
DEFAULT_MAX_SCALARS = 2**27


@dataclass(frozen=True)
class NoiseTree:
    levels: int
    dtw: float

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValidationError(f"noise tree needs at least one level, got {self.levels}")

    @classmethod
    def from_time_grid(cls, tgrid: TimeGrid) -> NoiseTree:
        return cls(levels=tgrid.noise_levels, dtw=tgrid.dtw)

    @property
    def sqrt_dtw(self) -> float:
        return float(np.sqrt(self.dtw))

    @staticmethod
    def node_count(level: int) -> int:
        return 2**level

    def increments(self, level: int) -> np.ndarray:
        """ΔW on the edges into level ``level`` + 1, indexed by child node."""
        signs = np.tile([1.0, -1.0], 2**level)
        return self.sqrt_dtw * signs

    def leaf_ancestor(self, leaf: int, level: int) -> int:
        return leaf >> (self.levels - level)


def _check_pair(values: np.ndarray) -> None:
    if values.shape[0] < 2 or values.shape[0] % 2:
        raise ValidationError(
            f"expected an even node count of a level k+1 >= 1, got {values.shape[0]} nodes"
        )


def branch(values: np.ndarray) -> np.ndarray:
    """Copy every parent value onto its two children."""
    return np.repeat(values, 2, axis=0)


def conditional_expectation(values: np.ndarray) -> np.ndarray:
    """E[F | F_k] for a level-(k+1) field: the average of the two children."""
    _check_pair(values)
    return 0.5 * (values[0::2] + values[1::2])


def martingale_coefficient(values: np.ndarray, tree: NoiseTree) -> np.ndarray:
    """Z with F = E[F | F_k] + Z ΔW_k node by node."""
    _check_pair(values)
    return (values[0::2] - values[1::2]) / (2.0 * tree.sqrt_dtw)


def check_budget(
    tgrid: TimeGrid,
    n_comp: int,
    n_x: int,
    max_levels: int = DEFAULT_MAX_LEVELS,
    max_scalars: int = DEFAULT_MAX_SCALARS,
) -> int:
    """Scalar count of a state field on this lattice; raises when over budget."""
    if tgrid.noise_levels > max_levels:
        logger.error("noise levels %s over budget %s", tgrid.noise_levels, max_levels)
        raise ValidationError(
            f"K={tgrid.noise_levels} exceeds the memory budget of {max_levels} noise levels"
        )
    scalars = sum(2 ** tgrid.level(m) for m in range(tgrid.steps + 1)) * n_comp * n_x
    if scalars > max_scalars:
        raise ValidationError(f"adapted field needs {scalars} scalars, budget is {max_scalars}")
    return scalars


@dataclass(frozen=True, eq=False)
class AdaptedField:
    """Per time index m an array of shape (2**k(m), n_comp, n_x).

    Path fields hold m = 0..M-1, state fields m = 0..M.
    """

    values: tuple[np.ndarray, ...]
    substeps: int

    def __post_init__(self) -> None:
        if not self.values:
            raise ValidationError("adapted field needs at least one time index")
        n_comp, n_x = self.values[0].shape[1:]
        for m, arr in enumerate(self.values):
            # M = K*R, so m // R never exceeds K
            expected = (2 ** (m // self.substeps), n_comp, n_x)
            if arr.shape != expected:
                raise ValidationError(
                    f"time index {m} has shape {arr.shape}, expected {expected} for an adapted field"
                )

    @classmethod
    def zeros(cls, tgrid: TimeGrid, n_comp: int, n_x: int, n_times: int | None = None) -> AdaptedField:
        n_times = tgrid.steps + 1 if n_times is None else n_times
        check_budget(tgrid, n_comp, n_x)
        return cls(
            tuple(np.zeros((2 ** tgrid.level(m), n_comp, n_x)) for m in range(n_times)),
            tgrid.substeps,
        )

    @classmethod
    def from_function(
        cls,
        tgrid: TimeGrid,
        n_times: int,
        fn: Callable[[int, int], np.ndarray],
    ) -> AdaptedField:
        """Build from ``fn(m, level)`` returning the (2**level, n_comp, n_x) array."""
        return cls(
            tuple(np.asarray(fn(m, tgrid.level(m)), dtype=float) for m in range(n_times)),
            tgrid.substeps,
        )

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        tgrid: TimeGrid,
        n_comp: int,
        n_x: int,
        n_times: int | None = None,
    ) -> AdaptedField:
        n_times = tgrid.steps + 1 if n_times is None else n_times
        return cls.from_function(
            tgrid, n_times, lambda m, k: rng.standard_normal((2**k, n_comp, n_x))
        )

    @classmethod
    def deterministic(
        cls, tgrid: TimeGrid, n_times: int, profile: Callable[[int], np.ndarray]
    ) -> AdaptedField:
        """Same spatial profile on every node of a time index."""

        def on_level(m: int, k: int) -> np.ndarray:
            values = np.asarray(profile(m), dtype=float)
            return np.broadcast_to(values, (2**k, *values.shape)).copy()

        return cls.from_function(tgrid, n_times, on_level)

    @property
    def n_times(self) -> int:
        return len(self.values)

    @property
    def n_comp(self) -> int:
        return self.values[0].shape[1]

    @property
    def n_x(self) -> int:
        return self.values[0].shape[2]

    def map(self, fn: Callable[[int, np.ndarray], np.ndarray]) -> AdaptedField:
        return AdaptedField(tuple(fn(m, arr) for m, arr in enumerate(self.values)), self.substeps)

    def _check_compatible(self, other: AdaptedField) -> None:
        if self.n_times != other.n_times or self.n_comp != other.n_comp or self.n_x != other.n_x:
            raise ValidationError(
                f"adapted field shapes differ: {(self.n_times, self.n_comp, self.n_x)} vs "
                f"{(other.n_times, other.n_comp, other.n_x)}"
            )

    def __add__(self, other: AdaptedField) -> AdaptedField:
        self._check_compatible(other)
        return AdaptedField(tuple(a + b for a, b in zip(self.values, other.values)), self.substeps)

    def __sub__(self, other: AdaptedField) -> AdaptedField:
        self._check_compatible(other)
        return AdaptedField(tuple(a - b for a, b in zip(self.values, other.values)), self.substeps)

    def __mul__(self, scalar: float) -> AdaptedField:
        return AdaptedField(tuple(scalar * a for a in self.values), self.substeps)

    __rmul__ = __mul__

    def __neg__(self) -> AdaptedField:
        return self * -1.0

    def masked(self, mask: np.ndarray) -> AdaptedField:
        return self.map(lambda m, arr: arr * mask)

    def time_scaled(self, weights: np.ndarray) -> AdaptedField:
        """Multiply time index m by ``weights[m]``."""
        return self.map(lambda m, arr: weights[m] * arr)

    def component_scaled(self, weights: np.ndarray) -> AdaptedField:
        """Multiply component c by ``weights[c]``."""
        return self.map(lambda m, arr: arr * np.asarray(weights)[None, :, None])

    def component(self, c: int) -> AdaptedField:
        return self.map(lambda m, arr: arr[:, c : c + 1, :].copy())

    def path(self) -> AdaptedField:
        """Drop the terminal index of a state field."""
        return AdaptedField(self.values[:-1], self.substeps)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    @staticmethod
    def stack_components(parts: Iterable[AdaptedField]) -> AdaptedField:
        parts = list(parts)
        return AdaptedField(
            tuple(np.concatenate(arrs, axis=1) for arrs in zip(*(p.values for p in parts))),
            parts[0].substeps,
        )

    def flatten(self) -> np.ndarray:
        """Time-major, then node, component, space."""
        return np.concatenate([arr.ravel() for arr in self.values])

    def unflatten(self, vector: np.ndarray) -> AdaptedField:
        """Field of this shape filled from a ``flatten`` ordered vector."""
        out, start = [], 0
        for arr in self.values:
            out.append(np.asarray(vector[start : start + arr.size], dtype=float).reshape(arr.shape))
            start += arr.size
        return AdaptedField(tuple(out), self.substeps)

    @property
    def size(self) -> int:
        return sum(arr.size for arr in self.values)


def expect_terminal_inner(a: np.ndarray, b: np.ndarray, grid: SpatialGrid) -> float:
    """2^{-k} Σ_nodes Σ_components Σ_x h a b for two arrays on the same level."""
    if a.shape != b.shape:
        raise ValidationError(f"terminal shapes differ: {a.shape} vs {b.shape}")
    return float(grid.h * np.sum(a * b) / a.shape[0])


def expect_spacetime_inner(
    a: AdaptedField,
    b: AdaptedField,
    grid: SpatialGrid,
    tgrid: TimeGrid,
    mask: np.ndarray | None = None,
    time_weight: np.ndarray | None = None,
) -> float:
    """Left-endpoint rule Σ_m dt E⟨a_m, b_m⟩ over m = 0..M-1."""
    if a.n_comp != b.n_comp or a.n_x != b.n_x:
        raise ValidationError(
            f"space-time shapes differ: {(a.n_comp, a.n_x)} vs {(b.n_comp, b.n_x)}"
        )
    if min(a.n_times, b.n_times) < tgrid.steps:
        raise ValidationError(f"fields must cover the {tgrid.steps} path times")
    total = 0.0
    for m in range(tgrid.steps):
        prod = a.values[m] * b.values[m]
        if mask is not None:
            prod = prod * mask
        term = np.sum(prod) / prod.shape[0]
        if time_weight is not None:
            if time_weight[m] == 0 or (term == 0 and not np.isfinite(time_weight[m])):
                continue
            term = time_weight[m] * term
        total += term
    return float(tgrid.dt * grid.h * total)


def path_metric(tgrid: TimeGrid, grid: SpatialGrid, n_comp: int, n_times: int) -> np.ndarray:
    """Diagonal quadrature weights dt 2^{-k} h in ``flatten`` order."""
    return np.concatenate(
        [
            np.full(2 ** tgrid.level(m) * n_comp * grid.n_x, tgrid.dt * grid.h / 2 ** tgrid.level(m))
            for m in range(n_times)
        ]
    )
