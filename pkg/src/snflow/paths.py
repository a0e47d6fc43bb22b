"""
Finite-dimensional approximations of Brownian motion.

Two approximations are provided: the Karhunen-Loeve series of the Brownian
bridge plus a linear term ("kl"), and exact simulation on a grid followed by
linear interpolation ("pl").  Both are smooth or piecewise smooth, so they
can drive an ordinary differential equation, and both are determined by a
matrix of standard-normal draws `omega`.

The rough-path helpers (Holder norms, canonical lifts, Chen and geometric
defects) are diagnostics: they let tests check that the approximations are
what they claim to be.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import attr
import numpy as np

from .exceptions import ArgumentError, DomainError
from .util import PathLike, positive, write_csv

logger = logging.getLogger(__name__)

PATH_KINDS = ["kl", "pl"]

# Times this far outside [0, T] (relative to T) are clipped, not rejected.
_TIME_SLACK = 1e-12


@attr.s(frozen=True, eq=False)
class BrownianApprox:
    """
    A smooth stand-in for one Brownian sample path on [0, horizon].

    `omega` is m x n, or B x m x n for a bundle of B independent paths that
    share a horizon (and a grid, for "pl").  For "pl", `grid` holds the n+1
    knot times and `knots` the cumulative path values at them.
    """

    kind = attr.ib(type=str, validator=attr.validators.in_(PATH_KINDS))
    horizon = attr.ib(type=float, converter=float, validator=positive)
    omega = attr.ib(type=np.ndarray, converter=np.asarray)
    grid = attr.ib(type=Optional[np.ndarray], default=None)
    knots = attr.ib(type=Optional[np.ndarray], default=None, init=False)

    def __attrs_post_init__(self):  # noqa: D105
        omega = np.asarray(self.omega, dtype=np.float64)
        if omega.ndim not in (2, 3) or omega.shape[-1] < 1:
            raise ArgumentError(
                f"omega must be m x n or B x m x n, not {omega.shape}"
            )
        if not np.all(np.isfinite(omega)):
            raise ArgumentError("omega has non-finite entries")
        object.__setattr__(self, "omega", omega)
        if self.kind == "pl":
            grid = _check_grid(self.grid, self.horizon)
            if grid.size != omega.shape[-1] + 1:
                raise ArgumentError(
                    f"A grid of {grid.size} times needs {grid.size - 1} "
                    + f"increments, not {omega.shape[-1]}"
                )
            steps = omega * np.sqrt(np.diff(grid))
            knots = np.concatenate(
                [np.zeros(omega.shape[:-1] + (1,)), np.cumsum(steps, -1)], -1
            )
            object.__setattr__(self, "grid", grid)
            object.__setattr__(self, "knots", knots)
        elif self.grid is not None:
            raise ArgumentError("Only piecewise-linear paths have a grid")

    @property
    def dim(self) -> int:
        """The noise dimension m."""
        return self.omega.shape[-2]

    @property
    def order(self) -> int:
        """The number n of normal draws per coordinate."""
        return self.omega.shape[-1]

    @property
    def batch(self) -> Optional[int]:
        """The number of bundled paths, or None for a single path."""
        return self.omega.shape[0] if self.omega.ndim == 3 else None

    @property
    def breakpoints(self) -> Optional[np.ndarray]:
        """Times where the derivative jumps (the grid for "pl")."""
        return self.grid

    def eval(self, t: float) -> np.ndarray:
        """The path value at time `t`."""
        if self.kind == "kl":
            return kl_eval(self, t)
        return pl_eval(self, t)

    def deriv(self, t: float) -> np.ndarray:
        """The time derivative of the path at `t`."""
        if self.kind == "kl":
            return kl_deriv(self, t)
        return pl_deriv(self, t)


@attr.s(frozen=True)
class HolderEstimate:
    """A discrete estimate of the alpha-Holder norm of a sampled path."""

    alpha = attr.ib(type=float)
    value = attr.ib(type=float)
    resolution = attr.ib(type=int)


def _check_grid(grid, horizon: float) -> np.ndarray:
    if grid is None:
        raise ArgumentError("A piecewise-linear path needs a grid")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2:
        raise ArgumentError("A grid needs at least two times")
    if not np.all(np.diff(grid) > 0):
        raise ArgumentError("Grid times must be strictly increasing")
    if grid[0] != 0.0 or grid[-1] != horizon:
        raise ArgumentError(
            f"Grid must run from 0 to {horizon}, not {grid[0]} to {grid[-1]}"
        )
    return grid


def uniform_grid(intervals: int, horizon: float) -> np.ndarray:
    """A grid of `intervals` equal steps on [0, horizon]."""
    if intervals < 1:
        raise ArgumentError(f"intervals must be >= 1, not {intervals}")
    grid = np.linspace(0.0, horizon, intervals + 1)
    grid[-1] = horizon
    return grid


def _check_time(path: BrownianApprox, t: float) -> float:
    t = float(t)
    slack = _TIME_SLACK * path.horizon
    if not -slack <= t <= path.horizon + slack:
        raise DomainError(f"t={t} is outside [0, {path.horizon}]")
    return min(max(t, 0.0), path.horizon)


def sample_kl(
    m: int,
    n: int,
    horizon: float,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> BrownianApprox:
    """
    Draw a Karhunen-Loeve path with `n` terms per coordinate.

    `size` draws a bundle of that many independent paths.  Between 4 and 10
    terms are a good choice for training.
    """
    if m < 1 or n < 1:
        raise ArgumentError(f"Need m >= 1 and n >= 1, got m={m}, n={n}")
    if not horizon > 0:
        raise ArgumentError(f"The horizon must be positive, not {horizon}")
    shape = (m, n) if size is None else (size, m, n)
    return BrownianApprox("kl", horizon, rng.standard_normal(shape))


def _kl_basis(n: int, horizon: float, t: float):
    k = np.arange(1, n)
    scale = np.sqrt(2 * horizon)
    values = np.empty(n)
    values[0] = t / np.sqrt(horizon)
    values[1:] = scale * np.sin(k * np.pi * t / horizon) / (k * np.pi)
    rates = np.empty(n)
    rates[0] = 1 / np.sqrt(horizon)
    rates[1:] = np.sqrt(2 / horizon) * np.cos(k * np.pi * t / horizon)
    return values, rates


def kl_eval(path: BrownianApprox, t: float) -> np.ndarray:
    """Evaluate the truncated bridge series at `t`."""
    t = _check_time(path, t)
    values, _ = _kl_basis(path.order, path.horizon, t)
    return path.omega @ values


def kl_deriv(path: BrownianApprox, t: float) -> np.ndarray:
    """The term-by-term time derivative of the truncated series at `t`."""
    t = _check_time(path, t)
    _, rates = _kl_basis(path.order, path.horizon, t)
    return path.omega @ rates


def sample_pl(
    m: int,
    grid: Sequence[float],
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> BrownianApprox:
    """
    Simulate Brownian motion exactly on `grid`, to be linearly interpolated.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if m < 1:
        raise ArgumentError(f"Need m >= 1, got m={m}")
    if grid.ndim != 1 or grid.size < 2:
        raise ArgumentError("A grid needs at least two times")
    n = grid.size - 1
    shape = (m, n) if size is None else (size, m, n)
    return BrownianApprox("pl", grid[-1], rng.standard_normal(shape), grid)


def _interval(path: BrownianApprox, t: float) -> int:
    # Right-continuous: a knot belongs to the interval it starts.
    k = int(np.searchsorted(path.grid, t, side="right")) - 1
    return min(max(k, 0), path.order - 1)


def pl_eval(path: BrownianApprox, t: float) -> np.ndarray:
    """The linear interpolant of the knot values at `t`."""
    t = _check_time(path, t)
    k = _interval(path, t)
    t0, t1 = path.grid[k], path.grid[k + 1]
    if t == t0:
        return path.knots[..., k].copy()
    w = (t - t0) / (t1 - t0)
    return (1 - w) * path.knots[..., k] + w * path.knots[..., k + 1]


def pl_deriv(path: BrownianApprox, t: float) -> np.ndarray:
    """The slope of the interval containing `t`, right-continuous at knots."""
    t = _check_time(path, t)
    k = _interval(path, t)
    dt = path.grid[k + 1] - path.grid[k]
    return (path.knots[..., k + 1] - path.knots[..., k]) / dt


def stack_paths(paths: Sequence[BrownianApprox]) -> BrownianApprox:
    """Bundle single paths of the same kind and horizon into one."""
    if not paths:
        raise ArgumentError("No paths to stack")
    first = paths[0]
    for path in paths:
        if path.batch is not None:
            raise ArgumentError("Can't stack paths that are already bundled")
        if path.kind != first.kind or path.horizon != first.horizon:
            raise ArgumentError("Stacked paths must share kind and horizon")
        if path.kind == "pl" and not np.array_equal(path.grid, first.grid):
            raise ArgumentError("Stacked piecewise-linear paths need one grid")
    omega = np.stack([p.omega for p in paths])
    return BrownianApprox(first.kind, first.horizon, omega, first.grid)


def holder_norm(times, values, alpha: float) -> HolderEstimate:
    """
    Estimate the alpha-Holder norm of a path sampled at `times`.

    The estimate is the largest sample norm plus the largest increment ratio
    over all pairs of sample times.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.size < 2:
        raise ArgumentError("Need at least two samples for a Holder norm")
    if not 0 < alpha < 1:
        raise ArgumentError(f"alpha must be in (0, 1), not {alpha}")
    values = values.reshape(times.size, -1)
    sup = np.max(np.linalg.norm(values, axis=1))
    gaps = np.abs(times[:, None] - times[None, :])
    jumps = np.linalg.norm(values[:, None, :] - values[None, :, :], axis=-1)
    off_diagonal = gaps > 0
    ratio = np.max(jumps[off_diagonal] / gaps[off_diagonal] ** alpha)
    return HolderEstimate(alpha, float(sup + ratio), int(times.size))


def _require_single(path: BrownianApprox) -> None:
    if path.batch is not None:
        raise ArgumentError("Rough-path lifts need a single path, not a bundle")


def _pl_area(path: BrownianApprox, t: float) -> np.ndarray:
    """The integral of X_r dX_r^T from 0 to t for a piecewise-linear path."""
    k = _interval(path, t)
    knots = path.knots
    steps = np.diff(knots, axis=-1)
    area = np.zeros((path.dim, path.dim))
    for j in range(k):
        area += np.outer(knots[:, j], steps[:, j])
        area += 0.5 * np.outer(steps[:, j], steps[:, j])
    partial = pl_eval(path, t) - knots[:, k]
    area += np.outer(knots[:, k], partial) + 0.5 * np.outer(partial, partial)
    return area


def _kl_area(path: BrownianApprox, t: float) -> np.ndarray:
    """An antiderivative in t of X_r dX_r^T for a Karhunen-Loeve path."""
    n, horizon = path.order, path.horizon
    freq = np.arange(n) * np.pi / horizon
    amp = np.zeros(n)
    amp[1:] = np.sqrt(2 * horizon) / (np.arange(1, n) * np.pi)
    root = np.sqrt(horizon)

    # H[j, l] is an antiderivative of basis_j * basis_l'.
    H = np.zeros((n, n))
    H[0, 0] = t * t / (2 * horizon)
    if n > 1:
        a = freq[1:]
        c = amp[1:]
        ramp = t * np.sin(a * t) / a + np.cos(a * t) / a**2
        H[0, 1:] = (c * a / root) * ramp
        H[1:, 0] = -(c / root) * np.cos(a * t) / a
        total = a[:, None] + a[None, :]
        diff = a[:, None] - a[None, :]
        same = np.isclose(diff, 0.0)
        safe_diff = np.where(same, 1.0, diff)
        inner = -np.cos(total * t) / total
        inner = inner - np.where(same, 0.0, np.cos(diff * t) / safe_diff)
        H[1:, 1:] = 0.5 * np.outer(c, c * a) * inner
    return path.omega @ H @ path.omega.T


def _area(path: BrownianApprox, t: float) -> np.ndarray:
    t = _check_time(path, t)
    if path.kind == "kl":
        return _kl_area(path, t)
    return _pl_area(path, t)


def canonical_lift(path: BrownianApprox, s: float, t: float) -> np.ndarray:
    """
    The second level of the canonical lift: the integral from s to t of
    (X_r - X_s) dX_r^T, in closed form.  Reversed times give the signed value.
    """
    _require_single(path)
    xs, xt = path.eval(s), path.eval(t)
    return _area(path, t) - _area(path, s) - np.outer(xs, xt - xs)


def ito_lift(path: BrownianApprox, s: float, t: float) -> np.ndarray:
    """The Ito-type second level: the canonical lift minus (t - s)/2 I."""
    return canonical_lift(path, s, t) - 0.5 * (t - s) * np.eye(path.dim)


def chen_defect(
    path: BrownianApprox, s: float, u: float, t: float
) -> np.ndarray:
    """
    How far the canonical lift is from satisfying Chen's relation on s, u, t.
    """
    xs, xu, xt = path.eval(s), path.eval(u), path.eval(t)
    return (
        canonical_lift(path, s, t)
        - canonical_lift(path, s, u)
        - canonical_lift(path, u, t)
        - np.outer(xu - xs, xt - xu)
    )


def geometric_defect(path: BrownianApprox, s: float, t: float) -> np.ndarray:
    """Sym(lift) minus half the outer square of the increment."""
    lift = canonical_lift(path, s, t)
    step = path.eval(t) - path.eval(s)
    return 0.5 * (lift + lift.T) - 0.5 * np.outer(step, step)


def write_path_csv(
    path: BrownianApprox, times: Sequence[float], file_path: PathLike
) -> None:
    """Dump `path` at `times` as CSV with header t,b_1,...,b_m."""
    _require_single(path)
    header = ["t"] + [f"b_{i + 1}" for i in range(path.dim)]
    rows = ([t, *path.eval(t)] for t in times)
    write_csv(file_path, header, rows)
