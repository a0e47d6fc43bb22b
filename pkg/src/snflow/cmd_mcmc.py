"""Optimizing targeted diffusions for sampling."""

import logging
from typing import List, Optional

import click
import numpy as np

from .cmd_train import run_training
from .config import RunConfig
from .experiment import configure
from .targets import sigma_table
from .util import run_config_options, snflow_command, write_csv

logger = logging.getLogger(__name__)

# train.l1_weight unless a config file, --set or --l1-weight says otherwise.
MCMC_L1_WEIGHT = 1e-4


def reference_sigma(target: str, x: np.ndarray) -> np.ndarray:
    """
    The diffusion to compare with: √(1 + x²) for the Cauchy target, whose
    zero-flux drift then vanishes, and 1 otherwise.
    """
    if target == "cauchy":
        return np.sqrt(1.0 + x**2)
    return np.ones_like(x)


@click.command("mcmc-opt", epilog=RunConfig.describe())
@click.option(
    "--target",
    type=click.Choice(["cauchy", "normal"]),
    default="cauchy",
    show_default=True,
    help="The stationary distribution to sample.",
)
@click.option(
    "--l1-weight",
    type=float,
    default=None,
    show_default=repr(MCMC_L1_WEIGHT),
    help=(
        "The L1 penalty on the diffusion network's weights.  Overrides "
        "train.l1_weight when given."
    ),
)
@click.option(
    "--extent",
    type=float,
    default=5.0,
    show_default=True,
    help="Tabulate sigma over [-EXTENT, EXTENT].",
)
@click.option(
    "--points",
    type=int,
    default=101,
    show_default=True,
    help="The number of points in the sigma table.",
)
@run_config_options
@snflow_command
def mcmc_opt(
    target: str,
    l1_weight: Optional[float],
    extent: float,
    points: int,
    config_file: Optional[str],
    settings: List[str],
    **flags,
) -> None:
    """
    Train the diffusion of a sampler for a 1-D target.

    The drift is chosen so the target stays stationary, and the diffusion is
    trained so the flow reaches the target by time T.  Besides the training
    artifacts, writes sigma.csv with columns x,sigma,reference.
    """
    if l1_weight is not None:
        settings = list(settings) + [f"train.l1_weight={l1_weight!r}"]
    flags["experiment"] = target
    experiment = configure(
        config_file,
        settings,
        flags,
        defaults=[("train.l1_weight", MCMC_L1_WEIGHT)],
    )

    model, out = run_training(experiment)
    grid = np.linspace(-extent, extent, points)
    sigma = sigma_table(model, grid)
    rows = np.column_stack([grid, sigma, reference_sigma(target, grid)])
    write_csv(out / "sigma.csv", ["x", "sigma", "reference"], rows)
    logger.info(f"Wrote {out / 'sigma.csv'}")
