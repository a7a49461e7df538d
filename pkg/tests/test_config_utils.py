import pytest

from stackelberg_lab import ValidationError
from stackelberg_lab.systems import Scenario
from stackelberg_lab.utils.config_utils import (
    ExperimentConfig,
    load_config,
    load_config_async,
    parse_config_text,
    to_ini,
)


def test_load_tiny(tiny_config: ExperimentConfig):
    assert tiny_config.n_x == 5
    assert tiny_config.substeps == 4
    assert tiny_config.g_i == [(0.05, 0.2), (0.8, 0.95)]
    assert tiny_config.scenario is Scenario.FULL_OBSERVATION
    assert tiny_config.lam == 0.1
    assert tiny_config.epsilons == [1e-2, 1e-3, 1e-4]


def test_weight_defaults_are_positive():
    config = parse_config_text("n_x = 5")
    assert config.lam == 0.1
    assert config.mu == 0.5
    assert config.beta_ladder == [1e2, 1e3, 1e4]


def test_tiny_ladder(tiny_config: ExperimentConfig):
    assert tiny_config.beta_ladder == [100.0, 1000.0, 10000.0]
    assert tiny_config.a21 == 6.0


def test_ini_text_reproduces_config(tiny_config: ExperimentConfig):
    assert parse_config_text(to_ini(tiny_config)) == tiny_config


def test_comments_and_blank_lines():
    config = parse_config_text("# header\n\nn_x = 7  # nodes\nscenario = second\n")
    assert config.n_x == 7
    assert config.scenario is Scenario.SECOND_COMPONENT


def test_replace_accepts_field_names(tiny_config: ExperimentConfig):
    changed = tiny_config.replace(lam=0.0, epsilon=1e-4)
    assert changed.lam == 0.0
    assert changed.epsilon == 1e-4
    assert tiny_config.epsilon == 1e-2


@pytest.mark.parametrize(
    "text, message",
    [
        ("n_x 5", "expected key = value"),
        ("n_x = 5\nn_x = 7", "duplicate key"),
        ("grid = 5", "Extra inputs"),
        ("n_x = 2", "n_x"),
        ("followers = 3", "followers=3"),
        ("epsilons = 1e-3, 1e-2, 1e-4", "strictly decreasing"),
        ("g0 = 0.3:1.7", "must lie inside"),
        ("g_i = 0.05:0.2, 0.8:1.2", "g_2 interval"),
        ("observation = 0.3", "start:end"),
        ("scenario = partial", "scenario"),
        ("beta_ladder = 1000.0, 100.0", "beta_ladder"),
        ("beta_ladder = 100.0", "beta_ladder"),
    ],
)
def test_rejected_text(text: str, message: str):
    with pytest.raises(ValidationError, match=message):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="does not exist"):
        load_config(tmp_path / "absent.ini")


def test_written_config_loads(tiny_config: ExperimentConfig, write_config):
    path = write_config(tiny_config.replace(n_x=7))
    assert load_config(path).n_x == 7


@pytest.mark.asyncio
async def test_async_loader_matches(tiny_ini: str, tiny_config: ExperimentConfig):
    assert await load_config_async(tiny_ini) == tiny_config


@pytest.mark.asyncio
async def test_async_loader_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="does not exist"):
        await load_config_async(tmp_path / "absent.ini")
