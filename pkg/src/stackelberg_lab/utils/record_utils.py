"""Run records and CSV tables written into an output directory."""

import csv
import time
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from stackelberg_lab import logger

Row = dict[str, float | int | str | bool]


class RunRecord(BaseModel):
    """Config echo, artifact version, per-phase wall times, output tables and check outcomes."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    subcommand: str
    version: str
    config: str
    seed: int
    wall_times: dict[str, float] = Field(default_factory=dict)
    tables: dict[str, list[Row]] = Field(default_factory=dict)
    checks: dict[str, bool] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        logger.info("phase %s started", name)
        try:
            yield
        finally:
            self.wall_times[name] = time.perf_counter() - start
            logger.info("phase %s took %.3f s", name, self.wall_times[name])

    def check(self, name: str, ok: bool) -> bool:
        self.checks[name] = bool(ok)
        if not ok:
            logger.warning("check %s failed", name)
        return bool(ok)


def _format_cell(value: float | int | str | bool) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.16e}"
    return str(value)


def write_csv(path: Path, rows: Sequence[Row]) -> Path:
    """Header line, ``,`` separator, floats in scientific notation with 17 significant digits."""
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(rows[0].keys()) if rows else []
    with path.open("w", newline="", encoding="utf-8") as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(row[key]) for key in header])
    return path


def write_record(out_dir: Path | str, record: RunRecord) -> Path:
    """Write every table to ``<table>.csv`` and the record itself to ``run.record``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in record.tables.items():
        write_csv(out_dir / f"{name}.csv", rows)
    path = out_dir / "run.record"
    path.write_text(record.model_dump_json(indent=2), encoding="utf-8")
    logger.info("wrote run record to %s", str(path.resolve()))
    return path


def read_record(path: Path | str) -> RunRecord:
    return RunRecord.model_validate_json(Path(path).read_text(encoding="utf-8"))
