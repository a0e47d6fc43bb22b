"""
Plot-ready artifacts: grayscale density images, SVG scatters, histograms.
"""

from __future__ import annotations

import logging
import pkgutil
from typing import Optional, Sequence

import jinja2
import numpy as np

from .exceptions import ArgumentError
from .util import PathLike, write_csv

logger = logging.getLogger(__name__)

SVG_SIZE = 400
SVG_MARGIN = 10


def _template(file_name: str) -> jinja2.Template:
    file_bytes = pkgutil.get_data("snflow", "templates/" + file_name)
    assert file_bytes
    env = jinja2.Environment(
        autoescape=True, trim_blocks=True, lstrip_blocks=True
    )
    return env.from_string(file_bytes.decode("utf-8"))


def density_pixels(logp, resolution: Sequence[int]) -> np.ndarray:
    """
    Gray levels for a lattice of log-densities: exp(logp) scaled so the
    largest value is 255.

    The lattice runs row by row from the bottom; images run from the top,
    so rows are flipped.  Non-finite values are black.
    """
    nx, ny = (int(r) for r in resolution)
    values = np.asarray(logp, dtype=float)
    if values.shape != (nx * ny,):
        raise ArgumentError(
            f"Expected {nx * ny} log-densities, got shape {values.shape}"
        )
    finite = np.isfinite(values)
    image = np.zeros_like(values)
    if finite.any():
        top = values[finite].max()
        image[finite] = np.exp(values[finite] - top)
    pixels = np.rint(255.0 * image).astype(np.uint8)
    return pixels.reshape(ny, nx)[::-1]


def write_pgm(file_path: PathLike, logp, resolution: Sequence[int]) -> None:
    """Write a binary (P5) grayscale image of exp(logp)."""
    pixels = density_pixels(logp, resolution)
    ny, nx = pixels.shape
    with open(file_path, "wb") as f:
        f.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    logger.info(f"Wrote image {file_path}")


def svg_text(
    points,
    polyline: bool = False,
    title: Optional[str] = None,
    size: int = SVG_SIZE,
) -> str:
    """
    An SVG 1.1 drawing of 2-D `points`, as dots or as a connected line.

    Points are scaled to fill the picture, with y pointing up.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or not len(points):
        raise ArgumentError(
            f"Need a non-empty list of 2-D points, not shape {points.shape}"
        )
    points = points[np.all(np.isfinite(points), axis=1)]
    lo = points.min(axis=0)
    span = np.maximum(points.max(axis=0) - lo, 1e-12)
    inner = size - 2 * SVG_MARGIN
    scaled = SVG_MARGIN + inner * (points - lo) / span
    scaled[:, 1] = size - scaled[:, 1]
    return _template("scatter.svg.j2").render(
        width=size,
        height=size,
        title=title,
        polyline=polyline,
        points=scaled.tolist(),
        radius=1,
        opacity=0.4 if len(points) > 1000 else 0.8,
    )


def write_svg(file_path: PathLike, points, **kwargs) -> None:
    """Write `svg_text` of `points` to `file_path`."""
    with open(file_path, "w", encoding="utf-8") as f:
        f.write(svg_text(points, **kwargs))
    logger.info(f"Wrote picture {file_path}")


def histogram(
    samples, bins: int = 100, bounds: Optional[Sequence[float]] = None
):
    """
    Bin centers, counts and densities of 1-D `samples`.

    Samples outside `bounds` are counted in the total but not in any bin, so
    the densities are fractions of all samples.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if bins < 1:
        raise ArgumentError(f"Need at least one bin, not {bins}")
    counts, edges = np.histogram(samples, bins=bins, range=bounds)
    widths = np.diff(edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    densities = counts / (samples.size * widths)
    return centers, counts, densities


def write_histogram_csv(
    file_path: PathLike,
    samples,
    bins: int = 100,
    bounds: Optional[Sequence[float]] = None,
    reference=None,
) -> None:
    """
    Write a histogram as CSV: center,count,density, plus a reference
    density column when `reference` (a function of the centers) is given.
    """
    centers, counts, densities = histogram(samples, bins, bounds)
    header = ["center", "count", "density"]
    columns = [centers, counts, densities]
    if reference is not None:
        header.append("reference")
        columns.append(np.asarray(reference(centers), dtype=float))
    rows = (
        [float(c), int(n), *(float(v) for v in rest)]
        for c, n, *rest in zip(*columns)
    )
    write_csv(file_path, header, rows)
