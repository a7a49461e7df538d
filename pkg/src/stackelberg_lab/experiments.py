"""Subcommand pipelines shared by the CLI and the tool server.

Every pipeline fills a RunRecord with tables and named checks; ``run_subcommand`` writes the
record and raises InvariantCheckError when a check failed.
"""

import dataclasses
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stackelberg_lab import InvariantCheckError, __version__, logger
from stackelberg_lab.hum_leader import (
    HumParams,
    ObservabilityMode,
    dense_observability_supported,
    epsilon_sweep,
    hierarchy_residual,
    observability_rayleigh,
    solve_leader,
)
from stackelberg_lab.lattice_weights import (
    SpatialGrid,
    SubdomainLayout,
    TimeGrid,
    build_eta0,
    build_weight_tables,
    carleman_energy,
    check_weight_inequalities,
)
from stackelberg_lab.nash import (
    coercivity_estimate,
    coercivity_slope,
    deviation_margin,
    gradient_check,
    nash_from_adjoint,
    solve_nash_fixed_point,
)
from stackelberg_lab.noise_tree import AdaptedField
from stackelberg_lab.oracle import (
    assemble,
    gramian_symmetry_deviation,
    metric_transpose_deviation,
    probe_deviation,
    solve_dense_hum,
    solve_dense_nash,
    spectral_sweep_slope,
    weak_direction_fraction,
)
from stackelberg_lab.parabolic_core import (
    CouplingField,
    Lattice,
    SourceSpec,
    adjoint_transposition_error,
    backward_sweep,
    duality_residual,
    forward_sweep,
)
from stackelberg_lab.systems import (
    FollowerControls,
    GameSpec,
    LeaderControls,
    PicardSettings,
    game_duality_residual,
    psi_energy_ratio,
    solve_coupled_adjoint,
    solve_optimality_system,
)
from stackelberg_lab.utils.config_utils import ExperimentConfig, to_ini
from stackelberg_lab.utils.record_utils import RunRecord, write_record

DUALITY_TOL = 1e-10
TRANSPOSITION_TOL = 1e-12
GRADIENT_TOL = 1e-6
CROSS_METHOD_TOL = 1e-8
HUM_ORACLE_TOL = 1e-7
SPECTRAL_TOL = 1e-9
HIERARCHY_TOL = 1e-8
LEADER_SCALE = 0.1
ORACLE_CG_TOL = 1e-10
DECAY_SLOPE_MIN = 0.45
COERCIVITY_SLOPE_TOL = 0.1
WEAK_EIGENVALUE = 1e-3


@dataclass(frozen=True, eq=False)
class Problem:
    config: ExperimentConfig
    spec: GameSpec
    y0: np.ndarray

    @property
    def lattice(self) -> Lattice:
        return self.spec.lattice


def _target_profile(config: ExperimentConfig, t: float) -> float:
    if config.target_profile == "constant":
        return 1.0
    return (1.0 - t / config.horizon) ** 2


def build_problem(config: ExperimentConfig, workers: int = 1) -> Problem:
    """Lattice, coupling, subdomains, weights, targets and y⁰ of one configuration."""
    grid = SpatialGrid(config.length, config.n_x)
    tgrid = TimeGrid(config.horizon, config.noise_levels, config.substeps)
    lattice = Lattice.build(grid, tgrid, max_levels=config.memory_budget_levels)
    layout = SubdomainLayout.from_intervals(
        grid, config.g0, list(config.g_i), config.observation, config.o0
    )
    coeffs = CouplingField.constant(config.a11, config.a12, config.a21, config.a22, tgrid, grid)
    coeffs.check_sign(layout.mask_o0, config.a0)
    params = build_eta0(grid, layout, config.lam, config.mu)
    weights = build_weight_tables(params, tgrid, config.log_cap, config.clamp_fraction)
    mode = grid.mode(1)
    amplitudes = np.array([config.target_1, config.target_2])

    def target(i: int) -> AdaptedField:
        shape = np.outer(amplitudes, mode * layout.mask_od) * (1.0 + 0.5 * i)
        return AdaptedField.deterministic(
            tgrid, tgrid.steps, lambda m: shape * _target_profile(config, tgrid.times[m])
        )

    spec = GameSpec(
        lattice=lattice,
        coeffs=coeffs,
        layout=layout,
        alpha=tuple(config.alpha),
        beta=tuple(config.beta),
        targets=tuple(target(i) for i in range(config.followers)),
        scenario=config.scenario,
        weights=weights,
        picard=PicardSettings(
            tol=config.picard_tol,
            max_iter=config.picard_max_iter,
            relaxation=config.relaxation,
            workers=workers,
        ),
        target_rho_cap=config.target_rho_cap,
    )
    y0 = np.stack([config.y0_1 * mode, config.y0_2 * mode])[None, :, :]
    logger.info(
        "problem: n_x=%s K=%s R=%s followers=%s scenario=%s",
        grid.n_x,
        tgrid.noise_levels,
        tgrid.substeps,
        spec.followers,
        spec.scenario.value,
    )
    return Problem(config=config, spec=spec, y0=y0)


def _random_leaders(problem: Problem, rng: np.random.Generator) -> LeaderControls:
    return LeaderControls.random(rng, problem.lattice, problem.spec.layout.mask_g0) * LEADER_SCALE


def _random_followers(problem: Problem, rng: np.random.Generator) -> FollowerControls:
    lattice = problem.lattice
    tgrid = lattice.tgrid
    admissible = problem.spec.admissible.astype(float)
    return FollowerControls(
        tuple(
            AdaptedField.random(rng, tgrid, 1, lattice.grid.n_x, tgrid.steps)
            .masked(mask)
            .time_scaled(admissible)
            * LEADER_SCALE
            for mask in problem.spec.layout.masks_gi
        )
    )


def duality_check(problem: Problem, rng: np.random.Generator, record: RunRecord) -> None:
    lattice, coeffs = problem.lattice, problem.spec.coeffs
    rows = []
    with record.phase("sweeps"):
        for draw in range(20):
            y0 = rng.standard_normal((1, 2, lattice.grid.n_x))
            src = SourceSpec(
                drift=AdaptedField.random(rng, lattice.tgrid, 2, lattice.grid.n_x, lattice.tgrid.steps),
                noise=AdaptedField.random(rng, lattice.tgrid, 2, lattice.grid.n_x, lattice.tgrid.steps),
            )
            drift = AdaptedField.random(rng, lattice.tgrid, 2, lattice.grid.n_x, lattice.tgrid.steps)
            terminal = rng.standard_normal(lattice.terminal_zeros(2).shape)
            state = forward_sweep(y0, lattice, coeffs, src)
            adjoint = backward_sweep(terminal, lattice, coeffs, drift)
            rows.append({"draw": draw, "residual": duality_residual(lattice, state, adjoint, src, drift)})
        transposition = adjoint_transposition_error(lattice, coeffs, rng)
    with record.phase("game"):
        spec = problem.spec
        leaders = _random_leaders(problem, rng)
        closed = solve_optimality_system(spec, problem.y0, leaders)
        coupled = solve_coupled_adjoint(spec, rng.standard_normal(lattice.terminal_zeros(2).shape))
        game = game_duality_residual(spec, problem.y0, leaders, closed.state, coupled)
    worst = max(row["residual"] for row in rows)
    record.tables["duality"] = rows
    record.tables["duality_summary"] = [
        {"max_residual": worst, "transposition_error": transposition, "game_residual": game}
    ]
    record.check("duality", worst <= DUALITY_TOL)
    record.check("transposition", transposition <= TRANSPOSITION_TOL)
    record.check("game_duality", game <= DUALITY_TOL)


def weights_report(problem: Problem, rng: np.random.Generator, record: RunRecord) -> None:
    spec = problem.spec
    lattice, tables = problem.lattice, spec.weights
    with record.phase("inequalities"):
        report = check_weight_inequalities(tables, lattice.tgrid)
    with record.phase("energies"):
        state = forward_sweep(problem.y0, lattice, spec.coeffs)
        half = lattice.tgrid.horizon / 2
        energies = [
            {"variant": "standard", "d": 3, "energy": carleman_energy(3, state, tables, lattice.grid, lattice.tgrid)},
            {
                "variant": "bar",
                "d": 3,
                "energy": carleman_energy(
                    3, state, tables, lattice.grid, lattice.tgrid, variant="bar", window=(half, lattice.tgrid.horizon)
                ),
            },
        ]
    rho_star_inv = np.exp(-tables.log_rho_star)
    record.tables["weights"] = [
        {
            "t": float(t),
            "gamma": float(tables.gamma[i]),
            "ell": float(tables.ell[i]),
            "log_rho_star": float(tables.log_rho_star[i]),
            "log_rho_bar": float(tables.log_rho_bar[i]),
            "rho_star_inv": float(rho_star_inv[i]),
        }
        for i, t in enumerate(tables.times)
    ]
    record.tables["constants"] = report.rows()
    record.tables["carleman"] = energies
    record.check("constants_finite", report.passed)
    record.check("ell_continuity", report.ell_jump == 0.0)
    record.check("rho_bound", report.rho_bound_ok)
    record.check("rho_star_monotone", report.rho_star_monotone)
    record.check("rho_bar_profile", report.rho_bar_profile_ok)


def nash_solve(problem: Problem, rng: np.random.Generator, record: RunRecord) -> None:
    spec, config = problem.spec, problem.config
    leaders = _random_leaders(problem, rng)
    with record.phase("fixed_point"):
        fixed = solve_nash_fixed_point(spec, problem.y0, leaders, config.nash_tol)
    with record.phase("adjoint"):
        adjoint = nash_from_adjoint(spec, problem.y0, leaders)
    with record.phase("diagnostics"):
        gap = fixed.v_star.distance(adjoint.v_star, problem.lattice)
        scale = 1.0 + np.sqrt(sum(problem.lattice.inner(v, v) for v in fixed.v_star.v))
        coercivity = coercivity_estimate(spec, max(config.n_probes, 10), rng)
        ladder = coercivity_slope(spec, list(config.beta_ladder), max(config.n_probes, 10), rng)
        margin = deviation_margin(spec, problem.y0, leaders, fixed, rng)
        gradient = gradient_check(spec, problem.y0, leaders, _random_followers(problem, rng), rng)
    record.tables["nash"] = [fixed.as_row(), adjoint.as_row()]
    record.tables["nash_summary"] = [
        {
            "method_gap": gap / scale,
            "rho0": coercivity.rho0,
            "coercivity_lower_bound": coercivity.lower_bound_estimate,
            "coercivity_slope": ladder.slope,
            "deviation_margin": margin,
            "gradient_gap": gradient,
        }
    ]
    record.check("residual", max(max(fixed.residuals), max(adjoint.residuals)) <= config.nash_tol)
    record.check("method_agreement", gap / scale <= CROSS_METHOD_TOL)
    record.tables["coercivity"] = ladder.as_rows()
    record.check("coercive", coercivity.lower_bound_estimate > 0)
    record.check("coercivity_slope", abs(ladder.slope - 1.0) <= COERCIVITY_SLOPE_TOL)
    record.check("unilateral_deviation", margin >= -1e-12)
    record.check("gradient", gradient <= GRADIENT_TOL)


def _hum_params(config: ExperimentConfig, epsilon: float) -> HumParams:
    return HumParams(epsilon=epsilon, cg_tol=config.cg_tol, cg_max_iter=config.cg_max_iter)


def leader_solve(problem: Problem, rng: np.random.Generator, record: RunRecord) -> None:
    config = problem.config
    with record.phase("hum"):
        solution = solve_leader(problem.spec, problem.y0, _hum_params(config, config.epsilon))
    with record.phase("hierarchy"):
        hierarchy = hierarchy_residual(problem.spec, problem.y0, solution)
    u1, u2, u3 = solution.control_norms
    record.tables["leader"] = [
        {
            "epsilon": solution.epsilon,
            "terminal_norm": solution.terminal_norm,
            "u1_norm": u1,
            "u2_norm": u2,
            "u3_norm": u3,
            "j_value": solution.j_value,
            "cg_iterations": solution.cg_iterations,
            "identity_residual": solution.identity_residual,
            "hierarchy_residual": hierarchy,
        }
    ]
    record.check("identity", solution.identity_residual <= 10 * config.cg_tol * solution.scale)
    record.check("hierarchy", hierarchy <= HIERARCHY_TOL)


def sweep(problem: Problem, rng: np.random.Generator, record: RunRecord) -> None:
    config = problem.config
    with record.phase("sweep"):
        table = epsilon_sweep(
            problem.spec, problem.y0, list(config.epsilons), _hum_params(config, config.epsilons[0])
        )
    record.tables["sweep"] = [dataclasses.asdict(row) for row in table.rows]
    record.tables["sweep_summary"] = [
        {
            "slope": table.slope,
            "max_control_norm": table.max_control_norm,
            "control_norm_ratio": table.control_norm_ratio,
            "control_bound_ratio": table.control_bound_ratio,
        }
    ]
    record.check(
        "identity", all(row.identity_residual <= 10 * config.cg_tol * row.scale for row in table.rows)
    )
    record.check("control_bounded", table.control_norm_ratio <= 10)
    record.check("control_bound_finite", bool(np.isfinite(table.control_bound_ratio)))
    record.check("decay_slope", table.slope >= DECAY_SLOPE_MIN)
    if all(row.terminal_norm > 0 for row in table.rows):
        norms = [row.terminal_norm for row in table.rows]
        record.check("terminal_decreasing", all(b < a for a, b in zip(norms, norms[1:])))


def observability(problem: Problem, rng: np.random.Generator, record: RunRecord) -> None:
    spec, config = problem.spec, problem.config
    with record.phase("sampled"):
        sampled = observability_rayleigh(spec, config.n_probes, ObservabilityMode.SAMPLED, rng)
        psi_ratio = psi_energy_ratio(spec, rng.standard_normal(problem.lattice.terminal_zeros(2).shape))
    rows = [{"mode": "sampled", "max_ratio": sampled.max_ratio, "min_gramian_eig": float("nan")}]
    record.check("sampled_finite", sampled.finite)
    record.check("psi_ratio_finite", bool(np.isfinite(psi_ratio)))
    lattice = problem.lattice
    if dense_observability_supported(lattice):
        with record.phase("dense"):
            dense = observability_rayleigh(spec, 0, ObservabilityMode.DENSE, rng)
        rows.append(
            {"mode": "dense", "max_ratio": dense.max_ratio, "min_gramian_eig": dense.min_gramian_eig_estimate}
        )
        record.check("gramian_positive", dense.min_gramian_eig_estimate > 0)
    record.tables["observability"] = rows
    record.tables["psi_energy"] = [{"ratio": psi_ratio}]


def oracle_compare(problem: Problem, rng: np.random.Generator, record: RunRecord) -> None:
    spec, config = problem.spec, problem.config
    lattice = problem.lattice
    with record.phase("assemble"):
        instance = assemble(spec, config.dense_cap)
        transpose = metric_transpose_deviation(instance)
        probes = probe_deviation(instance, rng)
    leaders = _random_leaders(problem, rng)
    with record.phase("nash"):
        dense = solve_dense_nash(instance, problem.y0, leaders)
        fixed = solve_nash_fixed_point(spec, problem.y0, leaders, config.nash_tol)
        adjoint = nash_from_adjoint(spec, problem.y0, leaders)
        scale = 1.0 + np.sqrt(sum(lattice.inner(v, v) for v in dense.v_star.v))
        nash_gap = max(
            dense.v_star.distance(fixed.v_star, lattice),
            dense.v_star.distance(adjoint.v_star, lattice),
            fixed.v_star.distance(adjoint.v_star, lattice),
        ) / scale
    with record.phase("hum"):
        # tighter than the run tolerance so the CG error stays below the comparison gate
        params = HumParams(config.epsilon, cg_tol=ORACLE_CG_TOL, cg_max_iter=config.cg_max_iter)
        iterative = solve_leader(spec, problem.y0, params)
        direct = solve_dense_hum(instance, problem.y0, config.epsilon)
        phi_gap = float(
            np.max(np.abs(iterative.phi_t_star.ravel() - direct.phi_t))
            / max(1.0, np.max(np.abs(direct.phi_t)))
        )
        spectral_gap = abs(direct.predicted_terminal_norm - direct.terminal_norm) / max(
            1.0, direct.predicted_terminal_norm
        )
        symmetry = gramian_symmetry_deviation(instance)
        weak = weak_direction_fraction(instance, problem.y0, WEAK_EIGENVALUE)
        spectral_slope = spectral_sweep_slope(instance, problem.y0, list(config.epsilons))
    record.tables["oracle"] = [
        {"comparison": "metric_transpose", "deviation": transpose},
        {"comparison": "probes", "deviation": probes},
        {"comparison": "nash", "deviation": nash_gap},
        {"comparison": "hum_phi", "deviation": phi_gap},
        {"comparison": "hum_spectral", "deviation": spectral_gap},
        {"comparison": "gramian_symmetry", "deviation": symmetry},
    ]
    record.tables["decay"] = [{"weak_fraction": weak, "spectral_slope": spectral_slope}]
    record.check("metric_transpose", transpose <= TRANSPOSITION_TOL)
    record.check("probes", probes <= TRANSPOSITION_TOL)
    record.check("nash", nash_gap <= CROSS_METHOD_TOL)
    record.check("hum_phi", phi_gap <= HUM_ORACLE_TOL)
    record.check("hum_spectral", spectral_gap <= SPECTRAL_TOL)
    record.check("gramian_symmetry", symmetry <= 1e-10)


Pipeline = Callable[[Problem, np.random.Generator, RunRecord], None]

PIPELINES: dict[str, Pipeline] = {
    "duality-check": duality_check,
    "weights-report": weights_report,
    "nash-solve": nash_solve,
    "leader-solve": leader_solve,
    "epsilon-sweep": sweep,
    "observability": observability,
    "oracle-compare": oracle_compare,
}


def execute(name: str, config: ExperimentConfig, seed: int = 0, workers: int = 1) -> RunRecord:
    """Run one pipeline and return its record without touching the filesystem."""
    record = RunRecord(subcommand=name, version=__version__, config=to_ini(config), seed=seed)
    with record.phase("setup"):
        problem = build_problem(config, workers)
    rng = np.random.default_rng(seed)
    logger.info("running %s", name)
    PIPELINES[name](problem, rng, record)
    return record


def run_subcommand(
    name: str, config: ExperimentConfig, out_dir: Path | str, seed: int = 0, workers: int = 1
) -> RunRecord:
    """Run ``name`` (or every pipeline for ``all``), write records, raise on failed checks."""
    out_dir = Path(out_dir)
    if name == "all":
        failed = []
        for sub in PIPELINES:
            if sub == "weights-report" and config.noise_levels * config.substeps < 8:
                logger.warning("skipping weights-report: it needs K*R >= 8 time nodes")
                continue
            record = execute(sub, config, seed, workers)
            write_record(out_dir / sub, record)
            failed += [f"{sub}:{check}" for check, ok in record.checks.items() if not ok]
        if failed:
            raise InvariantCheckError(f"failed checks: {', '.join(failed)}")
        return record
    record = execute(name, config, seed, workers)
    write_record(out_dir, record)
    if not record.passed:
        failed = [check for check, ok in record.checks.items() if not ok]
        raise InvariantCheckError(f"{name}: failed checks: {', '.join(failed)}")
    return record
