"""Experiment configuration: flat ``key = value`` text parsed into a validated model.

Lists are comma separated, subdomains are ``start:end`` coordinate intervals and ``#``
starts a comment. Unknown keys are rejected.
"""

from pathlib import Path
from typing import Annotated, Literal

import aiofiles
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator
from pydantic import ValidationError as PydanticValidationError

from stackelberg_lab import ValidationError, logger
from stackelberg_lab.systems import Scenario


def _split_list(value: object) -> object:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def _split_interval(value: object) -> object:
    if isinstance(value, str):
        parts = value.split(":")
        if len(parts) != 2:
            raise ValueError(f"interval must look like start:end, got {value!r}")
        return tuple(float(p) for p in parts)
    return value


Interval = Annotated[tuple[float, float], BeforeValidator(_split_interval)]
FloatList = Annotated[list[float], BeforeValidator(_split_list)]
IntervalList = Annotated[list[Interval], BeforeValidator(_split_list)]


class ExperimentConfig(BaseModel):
    """Every lattice, game, weight and solver parameter of one run."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    length: float = Field(1.0, gt=0)
    n_x: int = Field(5, ge=3)
    horizon: float = Field(1.0, gt=0)
    noise_levels: int = Field(2, ge=1)
    substeps: int = Field(1, ge=1)
    followers: int = Field(2, ge=1)

    a11: float = 0.0
    a12: float = 0.0
    a21: float = 1.0
    a22: float = 0.0
    a0: float = Field(0.5, gt=0)

    g0: Interval = (0.3, 0.7)
    g_i: IntervalList = [(0.05, 0.2), (0.8, 0.95)]
    observation: Interval = (0.3, 0.6)
    o0: Interval = (0.45, 0.55)

    alpha: FloatList = [1.0, 1.0]
    beta: FloatList = [100.0, 100.0]
    beta_ladder: FloatList = [1e2, 1e3, 1e4]
    scenario: Scenario = Scenario.FULL_OBSERVATION

    y0_1: float = 1.0
    y0_2: float = 0.5
    target_1: float = 0.1
    target_2: float = 0.1
    target_profile: Literal["constant", "vanishing"] = "vanishing"

    lam: float = Field(0.1, ge=0, alias="lambda")
    mu: float = Field(0.5, ge=0)
    log_cap: float = Field(700.0, gt=0)
    clamp_fraction: float = Field(0.01, ge=0, le=1)

    picard_tol: float = Field(1e-11, gt=0)
    picard_max_iter: int = Field(200, ge=1)
    relaxation: float = Field(1.0, gt=0, le=1)
    nash_tol: float = Field(1e-9, gt=0)

    epsilon: float = Field(1e-3, gt=0)
    epsilons: FloatList = [1e-2, 1e-3, 1e-4]
    cg_tol: float = Field(1e-8, gt=0, le=1e-2)
    cg_max_iter: int = Field(500, ge=1)
    n_probes: int = Field(20, ge=1)
    target_rho_cap: float = Field(float("inf"), gt=0)
    memory_budget_levels: int = Field(12, ge=1)
    dense_cap: int = Field(20_000, ge=1)

    @model_validator(mode="after")
    def _check_followers(self) -> "ExperimentConfig":
        m = self.followers
        if len(self.g_i) != m or len(self.alpha) != m or len(self.beta) != m:
            raise ValueError(
                f"followers={m} but g_i, alpha, beta have {len(self.g_i)}, "
                f"{len(self.alpha)}, {len(self.beta)} entries"
            )
        if any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError(f"epsilons must be strictly decreasing, got {self.epsilons}")
        ladder = self.beta_ladder
        if len(ladder) < 2 or ladder[0] <= 0 or any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError(f"beta_ladder needs two or more increasing positive values, got {ladder}")
        named = [("g0", self.g0), ("observation", self.observation), ("o0", self.o0)]
        named += [(f"g_{i + 1}", interval) for i, interval in enumerate(self.g_i)]
        for name, (start, end) in named:
            if not 0 <= start < end <= self.length:
                raise ValueError(f"{name} interval {start}:{end} must lie inside [0, {self.length}]")
        return self

    def replace(self, **changes: object) -> "ExperimentConfig":
        data = self.model_dump(by_alias=True)
        data.update({("lambda" if k == "lam" else k): v for k, v in changes.items()})
        return ExperimentConfig.model_validate(data)


def _format_value(value: object) -> str:
    match value:
        case Scenario():
            return value.value
        case tuple():
            return f"{value[0]!r}:{value[1]!r}"
        case list():
            return ", ".join(_format_value(v) for v in value)
        case float():
            return repr(value)
        case _:
            return str(value)


def to_ini(config: ExperimentConfig) -> str:
    """Flat text that parses back to an equal configuration."""
    data = config.model_dump(by_alias=True)
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in data.items())


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse flat ``key = value`` text.

    Raises:
        ValidationError: malformed lines, duplicate or unknown keys, violated invariants.
    """
    entries: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {number}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ValidationError(f"line {number}: duplicate key {key!r}")
        entries[key] = value
    try:
        return ExperimentConfig.model_validate(entries)
    except PydanticValidationError as e:
        logger.error("configuration rejected: %s", e)
        raise ValidationError(f"invalid configuration: {e}") from e


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"configuration file {path} does not exist")
    logger.info("Loading configuration from %s", str(path.resolve()))
    return parse_config_text(path.read_text(encoding="utf-8"))


async def load_config_async(path: Path | str) -> ExperimentConfig:
    """Same as ``load_config`` with a non-blocking read."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"configuration file {path} does not exist")
    async with aiofiles.open(path, "r", encoding="utf-8") as inp:
        text = await inp.read()
    return parse_config_text(text)
