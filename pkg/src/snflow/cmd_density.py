"""Evaluating densities on a grid."""

import logging
from typing import List, Optional, Tuple

import click

from .config import RunConfig
from .density import write_grid_csv
from .experiment import configure
from .render import write_pgm
from .util import run_config_options, snflow_command

logger = logging.getLogger(__name__)


@click.command(epilog=RunConfig.describe())
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
    help="The model checkpoint to evaluate.",
)
@click.option(
    "--extent",
    type=float,
    nargs=4,
    default=(-4.0, 4.0, -4.0, 4.0),
    show_default=True,
    metavar="XMIN XMAX YMIN YMAX",
    help="The region to cover.",
)
@click.option(
    "--resolution",
    type=int,
    nargs=2,
    default=(64, 64),
    show_default=True,
    metavar="NX NY",
    help="The number of grid points across and up.",
)
@click.option(
    "--paths",
    "n_paths",
    type=int,
    default=16,
    show_default=True,
    help="The number of Brownian paths to average over.",
)
@click.option(
    "--render", is_flag=True, help="Also write density.pgm, a gray image."
)
@run_config_options
@snflow_command
def density(
    checkpoint: str,
    extent: Tuple[float, float, float, float],
    resolution: Tuple[int, int],
    n_paths: int,
    render: bool,
    config_file: Optional[str],
    settings: List[str],
    **flags,
) -> None:
    """
    Estimate a 2-D model's log-density over a grid.

    Writes density.csv with columns x,y,logp, one row per grid point.
    """
    experiment = configure(config_file, settings, flags)
    model = experiment.load_model(checkpoint)
    out = experiment.output_dir()
    logger.info(
        f"Evaluating {resolution[0]} x {resolution[1]} points "
        + f"with {n_paths} paths"
    )
    points, logp = experiment.density_grid(
        model, extent, resolution, n_paths
    )
    write_grid_csv(out / "density.csv", points, logp)
    logger.info(f"Wrote {out / 'density.csv'}")
    if render:
        write_pgm(out / "density.pgm", logp, resolution)
