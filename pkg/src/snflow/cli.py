"""Snflow command-line interface."""

import logging

import click
import click_log

from . import __version__
from .cmd_density import density
from .cmd_mcmc import mcmc_opt
from .cmd_sample import sample
from .cmd_train import train

click_log.basic_config(logging.getLogger())


@click.group(
    help=f"""\
        Stochastic normalizing flows.

        Version {__version__}
    """
)
@click.version_option()
def cli() -> None:  # noqa: D401
    """The main entry point for the snflow command."""


cli.add_command(train)
cli.add_command(density)
cli.add_command(sample)
cli.add_command(mcmc_opt)
