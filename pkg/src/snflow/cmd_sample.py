"""Drawing samples from trained models."""

import logging
from typing import List, Optional

import click
import numpy as np

from . import targets
from .ad import as_tensor
from .config import RunConfig
from .experiment import (
    CHAIN_STREAM,
    SAMPLE_PATH_STREAM,
    SAMPLE_STREAM,
    Experiment,
    configure,
)
from .paths import stack_paths
from .render import write_histogram_csv, write_svg
from .solve import simulate_chain, wz_solve
from .util import make_rng, run_config_options, snflow_command, write_csv

logger = logging.getLogger(__name__)


def generate(experiment: Experiment, model, count: int) -> np.ndarray:
    """
    `count` independent samples of Z_T, each pushed forward along its own
    path.
    """
    rng = make_rng(experiment.config.run.seed, SAMPLE_STREAM)
    z0 = rng.standard_normal((count, model.dim))
    bundle = stack_paths(experiment.paths(model, count, SAMPLE_PATH_STREAM))
    config = experiment.config.solve_config(evaluation=True)
    z_end = wz_solve(model, bundle, as_tensor(z0), config)
    return z_end.detach().numpy()


def chain(
    experiment: Experiment, model, count: int, dt: float, burn_in: int
) -> np.ndarray:
    """`count` states of one Euler-Maruyama chain started at zero."""
    rng = make_rng(experiment.config.run.seed, CHAIN_STREAM)
    return simulate_chain(
        model,
        np.zeros(model.dim),
        dt,
        burn_in + count,
        rng,
        burn_in=burn_in,
    )


@click.command(epilog=RunConfig.describe())
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
    help="The model checkpoint to sample from.",
)
@click.option(
    "--mode",
    type=click.Choice(["generate", "chain"]),
    default="generate",
    show_default=True,
    help="Independent flow samples, or one long Euler-Maruyama chain.",
)
@click.option(
    "--count",
    type=int,
    default=10000,
    show_default=True,
    help="The number of samples, or of recorded chain steps.",
)
@click.option(
    "--dt", type=float, default=0.01, show_default=True, help="Chain step."
)
@click.option(
    "--burn-in",
    type=int,
    default=0,
    show_default=True,
    help="Chain steps to discard before recording.",
)
@click.option(
    "--bins",
    type=int,
    default=100,
    show_default=True,
    help="Histogram bins for 1-D chains.",
)
@click.option("--render", is_flag=True, help="Also write an SVG picture.")
@run_config_options
@snflow_command
def sample(
    checkpoint: str,
    mode: str,
    count: int,
    dt: float,
    burn_in: int,
    bins: int,
    render: bool,
    config_file: Optional[str],
    settings: List[str],
    **flags,
) -> None:
    """
    Sample from a trained model.

    "generate" writes samples.csv with header x_1,...,x_d.  "chain" writes
    chain.csv with header t,x_1,...,x_d, and for 1-D models a histogram.csv
    compared with the experiment's target density.
    """
    experiment = configure(config_file, settings, flags)
    model = experiment.load_model(checkpoint)
    out = experiment.output_dir()

    if mode == "generate":
        values = generate(experiment, model, count)
        targets.write_dataset(out / "samples.csv", values)
        logger.info(f"Wrote {count} samples to {out / 'samples.csv'}")
        if render and model.dim == 2:
            write_svg(out / "samples.svg", values, title="samples")
        return

    states = chain(experiment, model, count, dt, burn_in)
    times = dt * np.arange(burn_in + 1, burn_in + states.shape[0] + 1)
    header = ["t"] + targets.dataset_header(model.dim)
    write_csv(out / "chain.csv", header, np.column_stack([times, states]))
    logger.info(f"Wrote {states.shape[0]} chain states to {out / 'chain.csv'}")
    if model.dim == 1:
        write_histogram_csv(
            out / "histogram.csv",
            states[:, 0],
            bins=bins,
            bounds=_central_range(states[:, 0]),
            reference=_reference_density(experiment),
        )
    if render:
        picture = (
            np.column_stack([times, states[:, 0]])
            if model.dim == 1
            else states[:, :2]
        )
        write_svg(out / "chain.svg", picture, polyline=True, title="chain")


def _reference_density(experiment: Experiment):
    target = experiment.target()
    if target is None or target.dim != 1 or not target.normalized:
        return None

    def density(x: np.ndarray) -> np.ndarray:
        return np.exp(target.logdensity(x.reshape(-1, 1)))

    return density


def _central_range(values: np.ndarray):
    """The 1st to 99th percentile, so heavy tails don't swamp the bins."""
    lo, hi = np.percentile(values, [1, 99])
    if hi <= lo:
        hi = lo + 1.0
    return (float(lo), float(hi))
