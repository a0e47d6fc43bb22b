"""
Density estimation with stochastic flows.

Conditioned on a Brownian path, the flow is an ordinary continuous
normalizing flow, so its density at x comes from one reverse solve of the
augmented field.  Averaging the conditional densities over independent paths
estimates the marginal density; averaging their logs gives a lower bound on
the log-density, whose negation is the training loss.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence, Tuple

import attr
import numpy as np
import torch

from . import dynamics
from .ad import as_tensor
from .dynamics import SdeModel, TraceProbe
from .exceptions import ArgumentError, EstimationError, NumericalError
from .paths import BrownianApprox
from .solve import SolveConfig, wz_solve
from .util import PathLike, make_rng, write_csv

logger = logging.getLogger(__name__)


@attr.s(frozen=True, eq=False)
class DensityEstimate:
    """
    Log-densities at one or more points, from several paths.

    `conditional` has one row per path that succeeded (and one column per
    point for a batch).  `aggregate` is the log of the mean density
    ("log-mean-exp") or the mean log-density ("mean-bound").
    """

    conditional = attr.ib(type=np.ndarray)
    aggregate = attr.ib(type=np.ndarray)
    kind = attr.ib(
        type=str,
        validator=attr.validators.in_(["log-mean-exp", "mean-bound"]),
    )
    n_paths = attr.ib(type=int)
    failures = attr.ib(type=int, default=0)


def _reverse_config(config: SolveConfig) -> SolveConfig:
    return attr.evolve(config, direction="reverse")


def logdensity_single_path(
    model: SdeModel,
    path: BrownianApprox,
    x,
    config: SolveConfig,
    probe: Optional[TraceProbe] = None,
    create_graph: bool = False,
) -> torch.Tensor:
    """
    log p(x | path): solve back from (x, 0) at T to (z0, delta) at 0, then
    return log p0(z0) - delta.

    `x` may be one point or a batch of rows.
    """
    try:
        state = wz_solve(
            model,
            path,
            x,
            _reverse_config(config),
            probe=probe,
            augmented=True,
            create_graph=create_graph,
        )
    except NumericalError as exc:
        raise EstimationError(
            f"Couldn't solve for the density: {exc}",
            diagnostics={"cause": type(exc).__name__},
        ) from exc
    logp = dynamics.base_logprob(state.z) - state.delta_logp
    if not bool(torch.all(torch.isfinite(logp.detach()))):
        raise EstimationError(
            "The log-density came out non-finite",
            diagnostics={"z0": state.z.detach().numpy().tolist()},
        )
    return logp


def sample_forward(
    model: SdeModel,
    path: BrownianApprox,
    config: SolveConfig,
    z0=None,
    rng: Optional[np.random.Generator] = None,
    count: int = 1,
    probe: Optional[TraceProbe] = None,
    create_graph: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Push samples of p0 through the flow: (Z_T, log p_T(Z_T | path)).

    Without `z0`, `count` starting points are drawn from the standard normal
    with `rng`.  The log-density is log p0(z0) plus the accumulated change.
    """
    if z0 is None:
        if rng is None:
            raise ArgumentError("Need z0 or an rng to draw it with")
        z0 = as_tensor(rng.standard_normal((count, model.dim)))
    z0 = as_tensor(z0)
    state = wz_solve(
        model,
        path,
        z0,
        attr.evolve(config, direction="forward"),
        probe=probe,
        augmented=True,
        create_graph=create_graph,
    )
    return state.z, dynamics.base_logprob(z0) + state.delta_logp


def _conditionals(
    model: SdeModel,
    paths: Sequence[BrownianApprox],
    x,
    config: SolveConfig,
    workers: int,
    divergence: str,
    probe_seed: int,
) -> Tuple[np.ndarray, int]:
    if not paths:
        raise ArgumentError("Need at least one path")
    points, single = dynamics._batched(x)
    points = points.detach()

    def one(index_path):
        index, path = index_path
        probe = dynamics.choose_probe(
            model.dim,
            make_rng(probe_seed, index),
            divergence=divergence,
            batch=points.shape[0],
        )
        try:
            logp = logdensity_single_path(model, path, points, config, probe)
        except NumericalError as exc:
            logger.debug(f"Path {index} failed: {exc}")
            return None
        return logp.detach().numpy()

    jobs = list(enumerate(paths))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(job) for job in jobs]

    good = [r for r in results if r is not None]
    failures = len(results) - len(good)
    if not good:
        raise EstimationError(
            f"All {len(paths)} paths failed",
            diagnostics={"paths": len(paths), "failures": failures},
        )
    if failures:
        logger.warning(f"Dropped {failures} of {len(paths)} failed paths")
    values = np.stack(good)
    if single:
        values = values[:, 0]
    return values, failures


def logdensity_mc(
    model: SdeModel,
    paths: Sequence[BrownianApprox],
    x,
    config: SolveConfig,
    workers: int = 1,
    divergence: str = "auto",
    probe_seed: int = 0,
) -> DensityEstimate:
    """
    Estimate log p(x) as the log of the mean conditional density over
    `paths`, computed with a stable log-sum-exp.

    Paths whose solve fails are dropped (and counted).  Probes, when the
    divergence isn't exact, come from `probe_seed` and the path's index.
    """
    values, failures = _conditionals(
        model, paths, x, config, workers, divergence, probe_seed
    )
    n_good = values.shape[0]
    aggregate = torch.logsumexp(as_tensor(values), dim=0) - math.log(n_good)
    return DensityEstimate(
        conditional=values,
        aggregate=aggregate.numpy(),
        kind="log-mean-exp",
        n_paths=len(paths),
        failures=failures,
    )


def elbo_bound(
    model: SdeModel,
    paths: Sequence[BrownianApprox],
    x,
    config: SolveConfig,
    workers: int = 1,
    divergence: str = "auto",
    probe_seed: int = 0,
) -> DensityEstimate:
    """
    The mean conditional log-density over `paths`: a lower bound on
    log p(x), and so an upper bound on -log p(x).
    """
    values, failures = _conditionals(
        model, paths, x, config, workers, divergence, probe_seed
    )
    return DensityEstimate(
        conditional=values,
        aggregate=values.mean(axis=0),
        kind="mean-bound",
        n_paths=len(paths),
        failures=failures,
    )


def lattice(
    extent: Sequence[float], resolution: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    The points of a 2-D lattice, row by row from the bottom.

    Returns (xs, ys, points) with points of shape (ny * nx, 2).
    """
    x_lo, x_hi, y_lo, y_hi = (float(e) for e in extent)
    nx, ny = (int(r) for r in resolution)
    if nx < 1 or ny < 1 or not (x_lo < x_hi and y_lo < y_hi):
        raise ArgumentError(
            f"Bad lattice: extent {tuple(extent)}, resolution {(nx, ny)}"
        )
    xs = np.linspace(x_lo, x_hi, nx)
    ys = np.linspace(y_lo, y_hi, ny)
    grid_x, grid_y = np.meshgrid(xs, ys)
    points = np.column_stack([grid_x.ravel(), grid_y.ravel()])
    return xs, ys, points


def density_grid(
    model: SdeModel,
    paths: Sequence[BrownianApprox],
    extent: Sequence[float],
    resolution: Sequence[int],
    config: SolveConfig,
    workers: int = 1,
    divergence: str = "auto",
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Monte-Carlo log-densities of a 2-D model over a lattice.

    Returns (points, logp), with logp of shape (ny * nx,).
    """
    if model.dim != 2:
        raise ArgumentError(
            f"Density grids are for 2-D models, not d={model.dim}"
        )
    _, _, points = lattice(extent, resolution)
    estimate = logdensity_mc(
        model, paths, points, config, workers=workers, divergence=divergence
    )
    return points, np.asarray(estimate.aggregate)


def write_grid_csv(file_path: PathLike, points, logp) -> None:
    """Write lattice log-densities as CSV with header x,y,logp."""
    rows = ([p[0], p[1], v] for p, v in zip(points, logp))
    write_csv(file_path, ["x", "y", "logp"], rows)
