"""Miscellanous helpers."""

from __future__ import annotations

import csv
import functools
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import click
import click_log
import numpy as np

from .exceptions import (
    ArgumentError,
    ConfigError,
    NumericalError,
    SnflowException,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Exit statuses for the command line.
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Make a numpy Generator for `seed`.

    Extra integers select an independent stream, so that each worker or each
    purpose (data, paths, probes) gets its own sequence from a single seed.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def positive(instance, attribute, value) -> None:
    """An attrs validator: the value must be > 0."""
    if not value > 0:
        raise ArgumentError(f"{attribute.name} must be positive, not {value!r}")


def non_negative(instance, attribute, value) -> None:
    """An attrs validator: the value must be >= 0."""
    if not value >= 0:
        raise ArgumentError(
            f"{attribute.name} must be non-negative, not {value!r}"
        )


def write_csv(
    file_path: PathLike, header: Sequence[str], rows: Iterable[Sequence]
) -> None:
    """Write `rows` under `header`, with floats written round-trippably."""
    with open(file_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_value(v) for v in row])
    logger.debug(f"Wrote {file_path}")


def read_csv(file_path: PathLike) -> Tuple[List[str], np.ndarray]:
    """Read a numeric CSV file with a header line."""
    with open(file_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise ArgumentError(f"{file_path} is empty") from exc
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as exc:
            raise ArgumentError(f"{file_path}: {exc}") from exc
    values = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return header, values


def _csv_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def snflow_command(func):
    """
    Decorate snflow commands to provide snflow-specific behavior.

    - SnflowExceptions don't show tracebacks, and set the exit status:
      2 for configuration problems, 3 for numerical failures.

    - Set the log level from the command line for all of snflow.

    """

    @functools.wraps(func)
    @click_log.simple_verbosity_option(logging.getLogger("snflow"))
    def _wrapped(*args, **kwargs):
        try:
            func(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"Configuration error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericalError as exc:
            click.echo(f"Numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except SnflowException as exc:
            sys.exit(str(exc))

    return _wrapped


# Named command-line flags, and the configuration keys they set.
FLAG_KEYS = {
    "experiment": "run.experiment",
    "seed": "run.seed",
    "iters": "train.iterations",
    "lam": "model.lam",
    "batch_size": "train.batch_size",
    "output": "run.output_dir",
    "threads": "run.threads",
}


def run_config_options(func):
    """
    Add the options every snflow command shares: a config file, ``--set``
    overrides, and the named flags in FLAG_KEYS.
    """
    options = [
        click.option(
            "--config",
            "config_file",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="A TOML, YAML or INI configuration file.",
        ),
        click.option(
            "--set",
            "settings",
            multiple=True,
            metavar="SECTION.KEY=VALUE",
            help="Set one configuration value.  Can be repeated.",
        ),
        click.option("--experiment", default=None, help="run.experiment"),
        click.option("--seed", type=int, default=None, help="run.seed"),
        click.option(
            "--iters", type=int, default=None, help="train.iterations"
        ),
        click.option(
            "--lambda", "lam", type=float, default=None, help="model.lam"
        ),
        click.option(
            "--batch-size", type=int, default=None, help="train.batch_size"
        ),
        click.option("--output", default=None, help="run.output_dir"),
        click.option("--threads", type=int, default=None, help="run.threads"),
    ]
    for option in reversed(options):
        func = option(func)
    return func
