"""
Integrators.

`odesolve` integrates the random ODEs, with fixed-step RK4 or adaptive
Dormand-Prince.  States are tuples of tensors, so augmented and adjoint
systems go through the same code.  `euler_maruyama` and `milstein` step the
SDE itself and serve as references.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
import torch

from . import dynamics
from .ad import as_tensor
from .dynamics import AugmentedState, SdeModel, TraceProbe
from .exceptions import (
    ArgumentError,
    DivergenceError,
    SolverError,
    StiffnessError,
    UnsupportedStructureError,
)
from .paths import BrownianApprox
from .util import PathLike, positive, write_csv

logger = logging.getLogger(__name__)

State = Tuple[torch.Tensor, ...]
Field = Callable[[float, State], State]

# Adaptive step control.
SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
# Steps smaller than this fraction of the span mean the problem is stiff.
MIN_STEP_FRACTION = 1e-12

# Dormand-Prince 5(4), as tabulated by Hairer, Norsett and Wanner.
DP_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
DP_B = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
DP_E = [
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
]


@attr.s(frozen=True)
class SolveConfig:
    """
    How to integrate.

    `steps` is the number of RK4 steps over the whole span.  The adaptive
    method honors `rtol` and `atol`.  With `knot_alignment`, no step
    straddles a breakpoint of the driving path.  `direction` says which way
    `wz_solve` runs when it isn't given explicit times.
    """

    method = attr.ib(
        type=str,
        default="rk4",
        validator=attr.validators.in_(["rk4", "adaptive"]),
    )
    steps = attr.ib(type=int, default=20, converter=int, validator=positive)
    rtol = attr.ib(
        type=float, default=1e-6, converter=float, validator=positive
    )
    atol = attr.ib(
        type=float, default=1e-6, converter=float, validator=positive
    )
    direction = attr.ib(
        type=str,
        default="forward",
        validator=attr.validators.in_(["forward", "reverse"]),
    )
    knot_alignment = attr.ib(type=bool, default=True)
    max_steps = attr.ib(
        type=int, default=100000, converter=int, validator=positive
    )


@attr.s
class Trajectory:
    """Times and states of a solve, with step statistics."""

    times = attr.ib(type=List[float], factory=list)
    states = attr.ib(type=List[State], factory=list)
    steps = attr.ib(type=int, default=0)
    rejected = attr.ib(type=int, default=0)

    @property
    def final(self) -> State:  # noqa: D102
        return self.states[-1]

    @property
    def direction(self) -> str:  # noqa: D102
        if len(self.times) > 1 and self.times[-1] < self.times[0]:
            return "reverse"
        return "forward"


def _as_state(y0) -> Tuple[State, bool]:
    if isinstance(y0, (tuple, list)):
        return tuple(as_tensor(y) for y in y0), False
    return (as_tensor(y0),), True


def _combine(y: State, h: float, ks: Sequence[State], coeffs) -> State:
    out = []
    for i, yi in enumerate(y):
        total = yi
        for c, k in zip(coeffs, ks):
            if c != 0.0:
                total = total + (h * c) * k[i]
        out.append(total)
    return tuple(out)


def _finite(y: State) -> bool:
    return all(bool(torch.all(torch.isfinite(yi.detach()))) for yi in y)


def _segments(
    t0: float, t1: float, breakpoints, align: bool
) -> List[Tuple[float, float]]:
    """Split [t0, t1] (in solve order) at the interior breakpoints."""
    cuts = [t0, t1]
    if align and breakpoints is not None:
        lo, hi = min(t0, t1), max(t0, t1)
        inner = [float(b) for b in breakpoints if lo < b < hi]
        cuts = [t0] + sorted(inner, reverse=t1 < t0) + [t1]
    return list(zip(cuts[:-1], cuts[1:]))


def _segment_field(field: Field, a: float, b: float, align: bool) -> Field:
    """
    The field in local time s in [0, |b - a|], running from a to b.

    Stage times stay inside the segment, below its upper end, so that a
    right-continuous path derivative is read from this segment.
    """
    sign = 1.0 if b >= a else -1.0
    lo, hi = min(a, b), max(a, b)
    top = hi - 4 * np.spacing(hi) if align else hi

    def local(s: float, y: State) -> State:
        t = min(max(a + sign * s, lo), top)
        values = field(t, y)
        if sign > 0:
            return tuple(values)
        return tuple(-v for v in values)

    return local


def _rk4_segment(
    field: Field, y: State, span: float, n: int, traj, record, origin, sign
) -> State:
    h = span / n
    for i in range(n):
        s = i * h
        k1 = field(s, y)
        k2 = field(s + h / 2, _combine(y, h / 2, [k1], [1.0]))
        k3 = field(s + h / 2, _combine(y, h / 2, [k2], [1.0]))
        k4 = field(s + h, _combine(y, h, [k3], [1.0]))
        y = _combine(y, h / 6, [k1, k2, k3, k4], [1.0, 2.0, 2.0, 1.0])
        traj.steps += 1
        if not _finite(y):
            raise DivergenceError(
                f"The state became non-finite at t={origin + sign * (s + h)}"
            )
        if record:
            traj.times.append(origin + sign * (s + h))
            traj.states.append(y)
    return y


def _error_norm(
    err: State, y: State, y_new: State, config: SolveConfig
) -> float:
    total = 0.0
    count = 0
    for e, a, b in zip(err, y, y_new):
        scale = config.atol + config.rtol * torch.maximum(
            a.detach().abs(), b.detach().abs()
        )
        total += float(torch.sum((e.detach() / scale) ** 2))
        count += e.numel()
    return math.sqrt(total / max(count, 1))


def _adaptive_segment(
    field: Field,
    y: State,
    span: float,
    config: SolveConfig,
    total_span: float,
    traj,
    record,
    origin,
    sign,
) -> State:
    s = 0.0
    h = min(span, total_span / config.steps)
    min_step = MIN_STEP_FRACTION * total_span
    while s < span:
        if traj.steps + traj.rejected >= config.max_steps:
            raise SolverError(
                f"Gave up after {config.max_steps} steps at "
                + f"t={origin + sign * s}"
            )
        h = min(h, span - s)
        ks: List[State] = []
        for c, row in zip(DP_C, DP_A):
            ks.append(field(s + c * h, _combine(y, h, ks, row)))
        y_new = _combine(y, h, ks, DP_B)
        if not _finite(y_new):
            traj.rejected += 1
            h *= MIN_FACTOR
        else:
            zero = tuple(torch.zeros_like(yi) for yi in y)
            err = _combine(zero, h, ks, DP_E)
            norm = _error_norm(err, y, y_new, config)
            if norm <= 1.0:
                s += h
                if span - s <= 4 * np.spacing(span):
                    s = span
                y = y_new
                traj.steps += 1
                if record:
                    traj.times.append(origin + sign * s)
                    traj.states.append(y)
                factor = SAFETY * norm ** (-1 / 5) if norm > 0 else MAX_FACTOR
                h *= min(MAX_FACTOR, max(MIN_FACTOR, factor))
            else:
                traj.rejected += 1
                factor = SAFETY * norm ** (-1 / 5)
                h *= min(1.0, max(MIN_FACTOR, factor))
        if h < min_step and s < span:
            raise StiffnessError(
                f"Step size {h:.3g} underflowed at t={origin + sign * s}"
            )
    return y


def odesolve(
    field: Field,
    y0: Union[torch.Tensor, State],
    t0: float,
    t1: float,
    config: SolveConfig,
    breakpoints: Optional[Sequence[float]] = None,
    record: bool = True,
) -> Trajectory:
    """
    Integrate dy/dt = field(t, y) from `t0` to `t1`.

    `y0` is a tensor or a tuple of tensors; `field` gets and returns the
    same kind.  `t1 < t0` integrates backwards in time, by integrating the
    negated field forwards.  With `config.knot_alignment`, the span is cut
    at `breakpoints` and each piece is integrated on its own.
    """
    y, single = _as_state(y0)
    initial = y
    t0, t1 = float(t0), float(t1)

    def tuple_field(t: float, state: State) -> State:
        out = field(t, state[0] if single else state)
        return (out,) if single else tuple(out)

    traj = Trajectory()
    if record:
        traj.times.append(t0)
        traj.states.append(y)
    total_span = abs(t1 - t0)
    sign = 1.0 if t1 > t0 else -1.0
    for a, b in _segments(t0, t1, breakpoints, config.knot_alignment):
        span = abs(b - a)
        if span == 0.0:
            continue
        local = _segment_field(tuple_field, a, b, config.knot_alignment)
        if config.method == "rk4":
            n = max(1, math.ceil(config.steps * span / total_span - 1e-9))
            y = _rk4_segment(local, y, span, n, traj, record, a, sign)
        else:
            y = _adaptive_segment(
                local, y, span, config, total_span, traj, record, a, sign
            )
    if not record:
        traj.times = [t0, t1] if total_span else [t0]
        traj.states = [initial, y] if total_span else [y]
    logger.debug(
        f"Solved from {t0} to {t1}: {traj.steps} steps, "
        + f"{traj.rejected} rejected"
    )
    if single:
        traj.states = [state[0] for state in traj.states]
    return traj


def _check_increments(model: SdeModel, z0, grid, increments):
    grid = np.asarray(grid, dtype=np.float64)
    increments = as_tensor(increments)
    if grid.ndim != 1 or grid.size < 2 or not np.all(np.diff(grid) > 0):
        raise ArgumentError("Need an increasing grid of two or more times")
    n = grid.size - 1
    if increments.shape[0] != n or increments.shape[-1] != model.noise_dim:
        raise ArgumentError(
            f"A grid of {n} steps needs increments of shape "
            + f"({n}, [B,] {model.noise_dim}), not {tuple(increments.shape)}"
        )
    z, single = dynamics._batched(z0)
    return grid, increments, z.detach(), single


def _sigma_step(sigma: torch.Tensor, dB: torch.Tensor) -> torch.Tensor:
    if dB.dim() == 1:
        dB = dB.expand(sigma.shape[0], dB.shape[0])
    return torch.einsum("bik,bk->bi", sigma, dB)


def euler_maruyama(
    model: SdeModel, z0, grid: Sequence[float], increments
) -> torch.Tensor:
    """
    Step the Ito SDE along `grid` with the Brownian `increments`.

    `increments` has one row per step, optionally with a batch axis.
    """
    grid, increments, z, single = _check_increments(
        model, z0, grid, increments
    )
    for k in range(grid.size - 1):
        t, dt = float(grid[k]), float(grid[k + 1] - grid[k])
        mu = dynamics.ito_drift(model, z, t)
        sigma = dynamics.diffusion_matrix(model, z, t)
        z = (z + mu * dt + _sigma_step(sigma, increments[k])).detach()
        if not _finite((z,)):
            raise DivergenceError(f"The state became non-finite at t={t + dt}")
    return dynamics._unbatched(z, single)


MILSTEIN_STRUCTURES = ["constant", "diagonal", "drift-diag"]


def milstein(
    model: SdeModel, z0, grid: Sequence[float], increments
) -> torch.Tensor:
    """
    Euler-Maruyama plus the second-order term for each noise channel.

    Only diagonal (or one-dimensional) noise is supported, since the mixed
    iterated integrals of general noise aren't simulated.
    """
    if model.noise_dim > 1 and model.structure not in MILSTEIN_STRUCTURES:
        raise UnsupportedStructureError(
            f"Milstein needs diagonal noise, not {model.structure!r}"
        )
    grid, increments, z, single = _check_increments(
        model, z0, grid, increments
    )
    for k in range(grid.size - 1):
        t, dt = float(grid[k]), float(grid[k + 1] - grid[k])
        dB = increments[k]
        mu = dynamics.ito_drift(model, z, t)
        with torch.enable_grad():
            x = z.detach().requires_grad_(True)
            sigma = dynamics.diffusion_matrix(model, x, t)
            step = z + mu * dt + _sigma_step(sigma.detach(), dB)
            if not model.is_constant_diffusion:
                dB_rows = dB.expand(z.shape[0], model.noise_dim)
                iterated = 0.5 * (dB_rows**2 - dt)
                for j in range(model.noise_dim):
                    column = sigma[:, :, j]
                    slope = dynamics._jvp_rows(column, x, column, False)
                    step = step + slope * iterated[:, j : j + 1]
        z = step.detach()
        if not _finite((z,)):
            raise DivergenceError(f"The state became non-finite at t={t + dt}")
    return dynamics._unbatched(z, single)


def simulate_chain(
    model: SdeModel,
    z0,
    dt: float,
    steps: int,
    rng: np.random.Generator,
    burn_in: int = 0,
    every: int = 1,
) -> np.ndarray:
    """
    Run a long Euler-Maruyama chain with increments drawn from `rng`.

    Returns the recorded states after `burn_in` steps, every `every` steps,
    shape (records, d) or (records, B, d) for a batch of chains.
    """
    if steps < 1 or dt <= 0:
        raise ArgumentError(f"Need steps >= 1 and dt > 0, not {steps}, {dt}")
    z, single = dynamics._batched(z0)
    z = z.detach()
    records = []
    root_dt = math.sqrt(dt)
    for k in range(steps):
        dB = as_tensor(rng.standard_normal((z.shape[0], model.noise_dim)))
        t = k * dt
        mu = dynamics.ito_drift(model, z, t)
        sigma = dynamics.diffusion_matrix(model, z, t)
        z = (z + mu * dt + _sigma_step(sigma, root_dt * dB)).detach()
        if not _finite((z,)):
            raise DivergenceError(
                f"The chain became non-finite at step {k + 1}"
            )
        if k + 1 > burn_in and (k + 1 - burn_in) % every == 0:
            records.append(z.numpy().copy())
    out = np.array(records).reshape(len(records), z.shape[0], model.dim)
    logger.debug(f"Ran a chain of {steps} steps, kept {len(records)}")
    return out[:, 0, :] if single else out


def wz_solve(
    model: SdeModel,
    path: BrownianApprox,
    z0,
    config: SolveConfig,
    probe: Optional[TraceProbe] = None,
    augmented: bool = False,
    t0: Optional[float] = None,
    t1: Optional[float] = None,
    delta0=None,
    create_graph: bool = False,
    trajectory: bool = False,
):
    """
    Solve the Wong-Zakai ODE of `model` driven by `path`.

    By default this runs over [0, T], or [T, 0] when `config.direction` is
    "reverse".  With `augmented`, the log-density change is carried along
    (starting from `delta0`, zero by default) and an `AugmentedState` is
    returned.  `create_graph` keeps every step on the tape, so the result
    can be differentiated.  With `trajectory`, the whole `Trajectory` is
    returned instead of the final state.
    """
    horizon = path.horizon
    if t0 is None or t1 is None:
        forward = config.direction == "forward"
        t0 = 0.0 if forward else horizon
        t1 = horizon if forward else 0.0
    if max(t0, t1) > horizon * (1 + 1e-12):
        raise ArgumentError(
            f"The path covers [0, {horizon}], not up to {max(t0, t1)}"
        )
    z, single = dynamics._batched(z0)
    breakpoints = path.breakpoints if config.knot_alignment else None
    if not create_graph:
        z = z.detach()

    if augmented:
        if delta0 is None:
            delta = torch.zeros(z.shape[0], dtype=z.dtype)
        else:
            delta = as_tensor(delta0).reshape(z.shape[0])

        def field(t, state):
            return dynamics.augmented_field(
                model, path, probe, t, state[0], create_graph=create_graph
            )

        traj = odesolve(
            field, (z, delta), t0, t1, config, breakpoints, record=trajectory
        )
        if trajectory:
            return traj
        z_end, delta_end = traj.final
        return AugmentedState(
            dynamics._unbatched(z_end, single),
            dynamics._unbatched(delta_end, single),
        )

    def plain(t, state):
        return dynamics.wz_field(
            model, path, t, state, probe, create_graph=create_graph
        )

    traj = odesolve(plain, z, t0, t1, config, breakpoints, record=trajectory)
    if trajectory:
        return traj
    return dynamics._unbatched(traj.final, single)


def write_trajectory_csv(traj: Trajectory, file_path: PathLike) -> None:
    """
    Dump an augmented trajectory of one sample as CSV:
    t,z_1,...,z_d,delta_logp.
    """
    rows = []
    for t, state in zip(traj.times, traj.states):
        if not isinstance(state, tuple) or len(state) != 2:
            raise ArgumentError("Only augmented trajectories can be written")
        z, delta = state
        z = z.detach().reshape(-1, z.shape[-1])[0]
        delta = delta.detach().reshape(-1)[0]
        rows.append([t, *z.tolist(), float(delta)])
    d = len(rows[0]) - 2
    header = ["t"] + [f"z_{i + 1}" for i in range(d)] + ["delta_logp"]
    write_csv(file_path, header, rows)
