"""
Target distributions, and diffusions that have them as stationary laws.

The 2-D targets (banana, star) are data sets for density estimation; the
1-D targets (Cauchy, normal) are known up to a constant and are used to
build p-ergodic SDEs whose diffusion can be trained.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional

import attr
import numpy as np
import torch

from . import nets
from .ad import as_tensor
from .dynamics import SdeModel, diffusion_matrix
from .exceptions import ArgumentError, ConfigError, DomainError
from .util import PathLike, make_rng, read_csv, write_csv

logger = logging.getLogger(__name__)

CONVENTIONS = ["zero-flux", "literal"]

STAR_POINTS = 10
STAR_RADIUS_SD = 3.0 / 20.0

LogDensity = Callable[[torch.Tensor], torch.Tensor]
Sampler = Callable[[np.random.Generator, int], np.ndarray]


def _lib(x):
    """The array module to compute with: torch for tensors, numpy otherwise."""
    return torch if isinstance(x, torch.Tensor) else np


@attr.s(frozen=True)
class TargetSpec:
    """
    A target distribution.

    `logdensity` takes rows of points and returns one value per row.  It is
    exactly normalized when `normalized` is set.  `sampler(rng, size)` draws
    `size` rows.
    """

    name = attr.ib(type=str)
    dim = attr.ib(type=int)
    logdensity = attr.ib(type=LogDensity)
    sampler = attr.ib(type=Optional[Sampler], default=None)
    normalized = attr.ib(type=bool, default=True)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` samples, shape (size, dim)."""
        if self.sampler is None:
            raise ArgumentError(f"The {self.name} target has no sampler")
        return self.sampler(rng, size)


def banana_logdensity(x, y):
    """
    The banana density: x ~ N(0, 1) and x² + y ~ N(0, 2).

    log p = -(x² + (x² + y)²/2)/2 - log(2π√2).
    """
    u = x**2 + y
    return -0.5 * (x**2 + 0.5 * u**2) - math.log(2 * math.pi * math.sqrt(2))


def banana_sample(rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw x ~ N(0, 1), u ~ N(0, 2), and y = u - x²."""
    x = rng.standard_normal(size)
    u = math.sqrt(2.0) * rng.standard_normal(size)
    return np.column_stack([x, u - x**2])


def _star_radius(theta):
    lib = _lib(theta)
    return 2.0 / lib.sqrt(1.0 + 0.5 * lib.sin(STAR_POINTS * theta))


def star_sample(rng: np.random.Generator, size: int) -> np.ndarray:
    """
    The ten-pointed star: θ uniform on (-π, π), then a normal radius around
    2/√(1 + sin(10θ)/2) with standard deviation 3/20.
    """
    theta = rng.uniform(-math.pi, math.pi, size)
    r = _star_radius(theta) + STAR_RADIUS_SD * rng.standard_normal(size)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def star_logdensity(x, y):
    """
    The star's log-density through its polar form.

    The normalization ignores the normal radius' mass below zero, which is
    more than ten standard deviations away.
    """
    lib = _lib(x)
    r = lib.sqrt(x**2 + y**2)
    theta = lib.arctan2(y, x)
    z = (r - _star_radius(theta)) / STAR_RADIUS_SD
    return (
        -0.5 * z**2
        - math.log(STAR_RADIUS_SD * math.sqrt(2 * math.pi))
        - math.log(2 * math.pi)
        - lib.log(r)
    )


def cauchy_logdensity(x):
    """The standard Cauchy log-density, -log(1 + x²) - log π."""
    return -_lib(x).log1p(x**2) - math.log(math.pi)


def cauchy_sample(rng: np.random.Generator, size: int) -> np.ndarray:
    """Standard Cauchy draws, shape (size, 1)."""
    return rng.standard_cauchy(size).reshape(size, 1)


def normal_logdensity(x):
    """The standard normal log-density in one dimension."""
    return -0.5 * x**2 - 0.5 * math.log(2 * math.pi)


def normal_sample(rng: np.random.Generator, size: int) -> np.ndarray:
    """Standard normal draws, shape (size, 1)."""
    return rng.standard_normal((size, 1))


def cauchy_score(x):
    """(log p)' for the Cauchy target."""
    return -2.0 * x / (1.0 + x**2)


def normal_score(x):
    """(log p)' for the standard normal target."""
    return -x


def _rows2(func):
    def logdensity(points):
        return func(points[..., 0], points[..., 1])

    return logdensity


def _rows1(func):
    def logdensity(points):
        return func(points[..., 0])

    return logdensity


TARGETS = {
    "banana": TargetSpec("banana", 2, _rows2(banana_logdensity), banana_sample),
    "star": TargetSpec(
        "star", 2, _rows2(star_logdensity), star_sample, normalized=False
    ),
    "cauchy": TargetSpec("cauchy", 1, _rows1(cauchy_logdensity), cauchy_sample),
    "normal": TargetSpec("normal", 1, _rows1(normal_logdensity), normal_sample),
}

SCORES = {"cauchy": cauchy_score, "normal": normal_score}


def get_target(name: str) -> TargetSpec:
    """Look up a target by name."""
    try:
        return TARGETS[name]
    except KeyError:
        raise ConfigError(
            f"Unknown target {name!r}, choose from {', '.join(TARGETS)}"
        ) from None


def ergodic_drift_1d(
    logp_prime, sigma, sigma_prime, x, convention: str = "zero-flux"
):
    """
    The drift that makes a target p stationary for dZ = μ dt + σ dB.

    `logp_prime`, `sigma` and `sigma_prime` are functions of x.  The
    "zero-flux" drift solves μp = (σ²p)'/2:

        μ = σ² (log p)' / 2 + σ σ'

    The "literal" drift, -2σ²x/(1 + x²) + σ'/2, is specific to the Cauchy
    target and doesn't use `logp_prime`.
    """
    if convention not in CONVENTIONS:
        raise ArgumentError(
            f"Unknown convention {convention!r}, "
            + f"choose from {', '.join(CONVENTIONS)}"
        )
    s = sigma(x)
    lib = _lib(s)
    if bool(lib.any(s <= 0)):
        raise DomainError("The diffusion must be positive")
    ds = sigma_prime(x)
    if convention == "zero-flux":
        return 0.5 * s**2 * logp_prime(x) + s * ds
    return -2.0 * s**2 * x / (1.0 + x**2) + 0.5 * ds


def stationarity_check(drift, sigma, logp, grid, h: float = 1e-4) -> float:
    """
    The largest zero-flux residual |μp - (σ²p)'/2| over `grid`, with the
    derivative taken by central differences of step `h`.
    """
    x = np.asarray(grid, dtype=float)

    def flux(points):
        return sigma(points) ** 2 * np.exp(logp(points))

    derivative = (flux(x + h) - flux(x - h)) / (2 * h)
    residual = drift(x) * np.exp(logp(x)) - 0.5 * derivative
    return float(np.max(np.abs(residual)))


def _ergodic_sigma(spec: nets.MlpSpec, params, z) -> torch.Tensor:
    return torch.nn.functional.softplus(nets.forward(spec, params, z))


def ergodic_sde(
    target: str = "cauchy",
    preset: str = "cauchy-sigma-4x32",
    convention: str = "zero-flux",
    seed: int = 0,
    activation: str = "tanh",
    params=None,
    spec: Optional[nets.MlpSpec] = None,
) -> SdeModel:
    """
    A 1-D SDE with `target` as its stationary law and a trainable diffusion
    σ(x) = softplus(net(x)).

    The drift follows from σ by `convention`, with σ' from autograd.  The
    model's parameters are the network's; `spec` replaces the preset.
    """
    if target not in SCORES:
        raise ConfigError(
            "Targeted diffusions need a 1-D target with a known score, "
            + f"not {target!r}"
        )
    if convention not in CONVENTIONS:
        raise ConfigError(f"Unknown drift convention {convention!r}")
    score = SCORES[target]
    if spec is None:
        spec = nets.preset(preset, dim=1, activation=activation)
    if spec.in_dim != 1 or spec.out_dim != 1:
        raise ConfigError(
            "A targeted diffusion network must map 1 -> 1, not "
            + f"{spec.in_dim} -> {spec.out_dim}"
        )
    if params is None:
        params = nets.init(spec, seed, 0)
    params = as_tensor(params)
    if params.shape != (spec.n_params,):
        raise ConfigError(
            f"The diffusion network needs {spec.n_params} parameters, "
            + f"got shape {tuple(params.shape)}"
        )

    def diffusion_fn(z, t, theta):
        return _ergodic_sigma(spec, theta, z).unsqueeze(-1)

    def drift_fn(z, t, theta):
        with torch.enable_grad():
            x = z if z.requires_grad else z.detach().requires_grad_(True)
            s = _ergodic_sigma(spec, theta, x)
            (ds,) = torch.autograd.grad(s.sum(), x, create_graph=True)
            mu = ergodic_drift_1d(
                score, lambda _: s, lambda _: ds, x, convention
            )
        if not (z.requires_grad or as_tensor(theta).requires_grad):
            mu = mu.detach()
        return mu

    return SdeModel(
        dim=1,
        noise_dim=1,
        structure="diagonal",
        params=params,
        diffusion_spec=spec,
        drift_fn=drift_fn,
        diffusion_fn=diffusion_fn,
        tag={"ergodic": target, "convention": convention},
    )


def sigma_table(model: SdeModel, grid) -> np.ndarray:
    """σ(x) of a 1-D model at each point of `grid`."""
    x = as_tensor(np.asarray(grid, dtype=float).reshape(-1, 1))
    with torch.no_grad():
        sigma = diffusion_matrix(model, x)
    return sigma[:, 0, 0].numpy()


def dataset_header(dim: int) -> List[str]:
    """x_1,...,x_d."""
    return [f"x_{i + 1}" for i in range(dim)]


def draw_dataset(
    name: str, size: int, seed: int, *stream: int
) -> np.ndarray:
    """`size` samples of a target, from the seed's `stream`."""
    return get_target(name).sample(make_rng(seed, *stream), size)


def write_dataset(file_path: PathLike, samples) -> None:
    """Write samples as CSV, one per row, with header x_1,...,x_d."""
    samples = np.asarray(samples, dtype=float)
    write_csv(file_path, dataset_header(samples.shape[1]), samples)


def read_dataset(file_path: PathLike) -> np.ndarray:
    """Read a CSV data set written by `write_dataset`."""
    header, values = read_csv(file_path)
    if header != dataset_header(len(header)):
        raise ArgumentError(
            f"{file_path} should have header x_1,...,x_d, not {header}"
        )
    return values.reshape(-1, len(header))
