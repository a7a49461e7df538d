import asyncio

from mcp.server.fastmcp import FastMCP

from stackelberg_lab import logger
from stackelberg_lab.experiments import execute
from stackelberg_lab.utils.config_utils import ExperimentConfig, load_config_async
from stackelberg_lab.utils.record_utils import write_record

mcp = FastMCP(
    name="Stackelberg Lab Server",
    log_level="INFO",
)


async def _run_pipeline(
    name: str, config: ExperimentConfig, seed: int, output_dir: str | None
) -> dict:
    record = await asyncio.to_thread(execute, name, config, seed)
    if output_dir:
        await asyncio.to_thread(write_record, output_dir, record)
    return record.model_dump(mode="json", include={"subcommand", "tables", "checks", "wall_times"})


@mcp.tool()
async def weights_report(config_file: str, output_dir: str | None = None) -> dict | str:
    """Tabulate the Carleman weights of a configuration and check their inequalities.

    Args:
        config_file (str): Path of a flat key = value experiment configuration. Needs noise_levels * substeps >= 8.
        output_dir (str | None): Optional directory for run.record and the CSV tables.

    Returns:
        dict | str: Tables and check outcomes, or an error message if the operation fails.
    """

    logger.info("weights_report tool called for config: %s", config_file)

    try:
        config = await load_config_async(config_file)
        return await _run_pipeline("weights-report", config, 0, output_dir)
    except Exception as e:
        return f"There was an error building the weight report: {e}"


@mcp.tool()
async def duality_check(config_file: str, seed: int = 0, output_dir: str | None = None) -> dict | str:
    """Measure the discrete Ito duality residuals of the sweeps and of the game on random data.

    Args:
        config_file (str): Path of a flat key = value experiment configuration.
        seed (int): Seed of the random-probe generator.
        output_dir (str | None): Optional directory for run.record and the CSV tables.

    Returns:
        dict | str: Residual tables and check outcomes, or an error message if the operation fails.
    """

    logger.info("duality_check tool called for config: %s", config_file)

    try:
        config = await load_config_async(config_file)
        return await _run_pipeline("duality-check", config, seed, output_dir)
    except Exception as e:
        return f"There was an error checking the duality identity: {e}"


@mcp.tool()
async def nash_solve(config_file: str, seed: int = 0, output_dir: str | None = None) -> dict | str:
    """Compute the follower Nash equilibrium for random leader controls by two methods.

    Args:
        config_file (str): Path of a flat key = value experiment configuration.
        seed (int): Seed of the random-probe generator.
        output_dir (str | None): Optional directory for run.record and the CSV tables.

    Returns:
        dict | str: Per-method residuals, coercivity and gradient diagnostics, or an error message if the operation fails.
    """

    logger.info("nash_solve tool called for config: %s", config_file)

    try:
        config = await load_config_async(config_file)
        return await _run_pipeline("nash-solve", config, seed, output_dir)
    except Exception as e:
        return f"There was an error solving for the Nash equilibrium: {e}"


@mcp.tool()
async def leader_solve(
    config_file: str, epsilon: float | None = None, output_dir: str | None = None
) -> dict | str:
    """Synthesize the leader controls by penalized HUM and check the follower hierarchy.

    Args:
        config_file (str): Path of a flat key = value experiment configuration.
        epsilon (float | None): Penalization; overrides the epsilon key of the configuration.
        output_dir (str | None): Optional directory for run.record and the CSV tables.

    Returns:
        dict | str: Terminal norm, control norms and residuals, or an error message if the operation fails.
    """

    logger.info("leader_solve tool called for config: %s", config_file)

    try:
        config = await load_config_async(config_file)
        if epsilon is not None:
            config = config.replace(epsilon=epsilon)
        return await _run_pipeline("leader-solve", config, 0, output_dir)
    except Exception as e:
        return f"There was an error synthesizing the leader controls: {e}"


@mcp.tool()
async def epsilon_sweep(config_file: str, output_dir: str | None = None) -> dict | str:
    """Run the leader synthesis along the decreasing epsilon ladder of a configuration.

    Args:
        config_file (str): Path of a flat key = value experiment configuration.
        output_dir (str | None): Optional directory for run.record and the CSV tables.

    Returns:
        dict | str: One row per epsilon plus the log-log slope, or an error message if the operation fails.
    """

    logger.info("epsilon_sweep tool called for config: %s", config_file)

    try:
        config = await load_config_async(config_file)
        return await _run_pipeline("epsilon-sweep", config, 0, output_dir)
    except Exception as e:
        return f"There was an error running the epsilon sweep: {e}"


@mcp.tool()
async def observability(config_file: str, seed: int = 0, output_dir: str | None = None) -> dict | str:
    """Estimate the discrete observability constant of the coupled adjoint system.

    Args:
        config_file (str): Path of a flat key = value experiment configuration.
        seed (int): Seed of the random-probe generator.
        output_dir (str | None): Optional directory for run.record and the CSV tables.

    Returns:
        dict | str: Sampled and, on small lattices, dense ratios, or an error message if the operation fails.
    """

    logger.info("observability tool called for config: %s", config_file)

    try:
        config = await load_config_async(config_file)
        return await _run_pipeline("observability", config, seed, output_dir)
    except Exception as e:
        return f"There was an error estimating observability: {e}"


@mcp.tool()
async def oracle_compare(config_file: str, seed: int = 0, output_dir: str | None = None) -> dict | str:
    """Compare every iterative solver with the dense reference solver on a tiny lattice.

    Args:
        config_file (str): Path of a flat key = value experiment configuration with at most 20000 dense unknowns.
        seed (int): Seed of the random-probe generator.
        output_dir (str | None): Optional directory for run.record and the CSV tables.

    Returns:
        dict | str: Deviation per comparison and check outcomes, or an error message if the operation fails.
    """

    logger.info("oracle_compare tool called for config: %s", config_file)

    try:
        config = await load_config_async(config_file)
        return await _run_pipeline("oracle-compare", config, seed, output_dir)
    except Exception as e:
        return f"There was an error comparing against the dense oracle: {e}"


def main():
    logger.info("Starting MCP server...")
    mcp.run(transport="stdio")


if __name__ == "__main__":
    main()
