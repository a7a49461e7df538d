from pathlib import Path

import numpy as np
import pytest

from stackelberg_lab.experiments import Problem, build_problem
from stackelberg_lab.lattice_weights import SpatialGrid, TimeGrid
from stackelberg_lab.parabolic_core import CouplingField, Lattice
from stackelberg_lab.systems import Scenario
from stackelberg_lab.utils.config_utils import ExperimentConfig, load_config, to_ini

CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.fixture
def tiny_ini():
    test_file = CONFIGS / "tiny.ini"
    yield f"{test_file.resolve()}"


@pytest.fixture
def desk_ini():
    test_file = CONFIGS / "desk.ini"
    yield f"{test_file.resolve()}"


@pytest.fixture
def tiny_config(tiny_ini: str) -> ExperimentConfig:
    return load_config(tiny_ini)


@pytest.fixture
def tiny_problem(tiny_config: ExperimentConfig) -> Problem:
    return build_problem(tiny_config)


@pytest.fixture(params=list(Scenario), ids=lambda s: s.value)
def scenario_problem(request, tiny_config: ExperimentConfig) -> Problem:
    return build_problem(tiny_config.replace(scenario=request.param))


@pytest.fixture
def write_config(tmp_path):
    """Write a configuration to a temporary file and return its path."""

    def _write(config: ExperimentConfig, name: str = "run.ini") -> str:
        path = tmp_path / name
        path.write_text(to_ini(config), encoding="utf-8")
        return f"{path.resolve()}"

    yield _write


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def small_lattice() -> Lattice:
    """n_x = 7, K = 3, R = 2: every sweep feature including held martingale parts."""
    return Lattice.build(SpatialGrid(1.0, 7), TimeGrid(1.0, 3, 2))


@pytest.fixture
def random_coupling(small_lattice: Lattice, rng: np.random.Generator) -> CouplingField:
    tgrid, grid = small_lattice.tgrid, small_lattice.grid
    a = 0.5 * rng.uniform(-1.0, 1.0, size=(tgrid.steps, 2, 2, grid.n_x))
    return CouplingField(a)
