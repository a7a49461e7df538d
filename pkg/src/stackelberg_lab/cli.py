"""Batch command line: ``stackelberg-lab <subcommand> --config PATH --out DIR``.

Exit codes: 0 success, 2 validation error, 3 solver failure, 4 invariant-check failure.
"""

import logging
from pathlib import Path
from typing import Annotated

import typer

from stackelberg_lab import InvariantCheckError, SolverError, ValidationError, logger
from stackelberg_lab.experiments import PIPELINES, run_subcommand
from stackelberg_lab.utils.config_utils import load_config

EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4

HELP = {
    "nash-solve": "Follower Nash equilibrium by fixed point and adjoint characterization, cross-checked.",
    "leader-solve": "Penalized HUM leader synthesis with the hierarchy-consistency check.",
    "epsilon-sweep": "Leader synthesis along the configured epsilon ladder.",
    "duality-check": "Discrete Ito duality residuals on random data.",
    "weights-report": "Carleman weight tables and inequality constants.",
    "observability": "Sampled and dense observability ratios.",
    "oracle-compare": "Every iterative solver against the dense reference on a tiny lattice.",
    "all": "Every subcommand, each into its own subdirectory of --out.",
}

app = typer.Typer(
    name="stackelberg-lab",
    help="Stackelberg-Nash null controllability solver and verification lab.",
    no_args_is_help=True,
    add_completion=False,
)

ConfigOption = Annotated[
    Path, typer.Option("--config", help="Flat key = value experiment configuration.")
]
OutOption = Annotated[Path, typer.Option("--out", help="Directory for run.record and CSV tables.")]
ParallelOption = Annotated[
    int, typer.Option("--parallel", min=1, help="Worker threads for per-follower solves.")
]
SeedOption = Annotated[
    int, typer.Option("--seed", min=0, help="Seed of the random-probe generator.")
]
VerboseOption = Annotated[bool, typer.Option("--verbose", help="Log solver iterations.")]


def run(
    name: str, config: Path, out: Path, parallel: int = 1, seed: int = 0, verbose: bool = False
) -> int:
    """Run one subcommand and map the outcome to an exit code."""
    if verbose:
        logger.setLevel(logging.DEBUG)
    try:
        run_subcommand(name, load_config(config), out, seed=seed, workers=parallel)
    except ValidationError as e:
        typer.echo(f"validation error: {e}", err=True)
        return EXIT_VALIDATION
    except SolverError as e:
        typer.echo(f"solver failure: {e}", err=True)
        return EXIT_SOLVER
    except InvariantCheckError as e:
        typer.echo(f"invariant check failed: {e}", err=True)
        return EXIT_INVARIANT
    typer.echo(f"{name}: results written to {out}")
    return 0


def _register(name: str) -> None:
    def command(
        config: ConfigOption,
        out: OutOption = Path("out"),
        parallel: ParallelOption = 1,
        seed: SeedOption = 0,
        verbose: VerboseOption = False,
    ) -> None:
        code = run(name, config, out, parallel, seed, verbose)
        if code:
            raise typer.Exit(code)

    app.command(name, help=HELP[name])(command)


for _name in [*PIPELINES, "all"]:
    _register(_name)


def main() -> None:
    app()
