"""
Training stochastic flows.

Gradients come either from the adjoint method, which integrates an adjoint
system backwards alongside the state, or from backpropagating through the
unrolled solver.  Parameters are updated with Adagrad.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Callable, Dict, List, Optional, Tuple

import attr
import numpy as np
import torch

from . import dynamics
from .ad import as_tensor
from .dynamics import SdeModel, TraceProbe
from .exceptions import (
    GradientError,
    NumericalError,
    ResourceError,
    TrainingAborted,
)
from .paths import (
    BrownianApprox,
    sample_kl,
    sample_pl,
    stack_paths,
    uniform_grid,
)
from .solve import SolveConfig, odesolve, wz_solve
from .util import make_rng, non_negative, positive

logger = logging.getLogger(__name__)

# The clock for wall-time metrics.
_clock = time.perf_counter

ADAGRAD_EPS = 1e-8

# Random streams derived from the training seed.
BATCH_STREAM = 1
PROBE_STREAM = 2

LossFunc = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
Metrics = Dict[str, Any]


@attr.s(frozen=True)
class TrainConfig:
    """Settings for the training loops."""

    lr = attr.ib(type=float, default=0.1, converter=float, validator=positive)
    iterations = attr.ib(
        type=int, default=2000, converter=int, validator=non_negative
    )
    batch_size = attr.ib(
        type=int, default=1000, converter=int, validator=positive
    )
    paths_per_batch = attr.ib(
        type=int, default=1, converter=int, validator=positive
    )
    kl_order = attr.ib(type=int, default=6, converter=int, validator=positive)
    grad_mode = attr.ib(
        type=str,
        default="adjoint",
        validator=attr.validators.in_(["adjoint", "discretize"]),
    )
    l1_weight = attr.ib(
        type=float, default=0.0, converter=float, validator=non_negative
    )
    seed = attr.ib(type=int, default=0, converter=int)
    per_sample_paths = attr.ib(type=bool, default=False)
    path_kind = attr.ib(
        type=str, default="kl", validator=attr.validators.in_(["kl", "pl"])
    )
    intervals = attr.ib(
        type=int, default=20, converter=int, validator=positive
    )
    divergence = attr.ib(
        type=str,
        default="auto",
        validator=attr.validators.in_(["auto", "exact", "probe"]),
    )
    probe_distribution = attr.ib(
        type=str,
        default="rademacher",
        validator=attr.validators.in_(["rademacher", "gaussian"]),
    )
    probe_count = attr.ib(
        type=int, default=1, converter=int, validator=positive
    )
    probe_resample = attr.ib(type=bool, default=False)


@attr.s
class AdagradState:
    """Accumulated squared gradients, one per parameter."""

    accumulator = attr.ib(type=torch.Tensor)
    eps = attr.ib(type=float, default=ADAGRAD_EPS)

    @classmethod
    def like(cls, params) -> AdagradState:
        """A fresh state for `params`."""
        return cls(torch.zeros_like(as_tensor(params)).detach())


def adagrad_step(
    params, grads, state: AdagradState, lr: float
) -> torch.Tensor:
    """
    One Adagrad update: accumulate g², then step by lr·g/√(acc + eps).

    `state` is updated in place; the new parameters are returned.
    """
    params = as_tensor(params).detach()
    grads = as_tensor(grads).detach()
    if grads.shape != params.shape or state.accumulator.shape != params.shape:
        raise GradientError(
            f"Parameters {tuple(params.shape)}, gradients "
            + f"{tuple(grads.shape)} and accumulator "
            + f"{tuple(state.accumulator.shape)} must match"
        )
    state.accumulator = state.accumulator + grads**2
    return params - lr * grads / torch.sqrt(state.accumulator + state.eps)


def adjoint_grads(
    model: SdeModel,
    path: BrownianApprox,
    probe: Optional[TraceProbe],
    loss: LossFunc,
    start,
    config: SolveConfig,
) -> Tuple[float, torch.Tensor]:
    """
    (loss, gradient) by the adjoint method.

    The augmented state runs from `start` in `config.direction` to (z, delta)
    where `loss(z, delta)` is evaluated.  Then (z, delta, a_z, a_delta, g)
    is integrated back to the starting time, and g ends as the gradient.
    """
    params = model.params.detach()
    frozen = model.with_params(params)
    forward = config.direction == "forward"
    t_start = 0.0 if forward else path.horizon
    t_end = path.horizon if forward else 0.0
    breakpoints = path.breakpoints if config.knot_alignment else None
    try:
        final = wz_solve(
            frozen, path, start, config, probe, augmented=True
        )
    except NumericalError as exc:
        raise GradientError(f"The forward solve failed: {exc}") from exc

    with torch.enable_grad():
        z_end = final.z.detach().requires_grad_(True)
        delta_end = final.delta_logp.detach().requires_grad_(True)
        value = loss(z_end, delta_end)
        if value.requires_grad:
            a_z, a_delta = torch.autograd.grad(
                value, (z_end, delta_end), allow_unused=True
            )
        else:
            a_z, a_delta = None, None
    a_z = torch.zeros_like(z_end) if a_z is None else a_z
    a_delta = torch.zeros_like(delta_end) if a_delta is None else a_delta

    def adjoint_field(t, state):
        z, _, a_z, a_delta, _ = state
        with torch.enable_grad():
            x = z.detach().requires_grad_(True)
            theta = params.clone().requires_grad_(True)
            f, rate = dynamics.augmented_field(
                model.with_params(theta), path, probe, t, x, create_graph=True
            )
            pulled = torch.autograd.grad(
                (f, rate),
                (x, theta),
                grad_outputs=(a_z, a_delta),
                allow_unused=True,
            )
        vjp_z = torch.zeros_like(x) if pulled[0] is None else pulled[0]
        vjp_theta = (
            torch.zeros_like(theta) if pulled[1] is None else pulled[1]
        )
        return (
            f.detach(),
            rate.detach(),
            -vjp_z,
            torch.zeros_like(a_delta),
            -vjp_theta,
        )

    state = (
        z_end.detach(),
        delta_end.detach(),
        a_z.detach(),
        a_delta.detach(),
        torch.zeros_like(params),
    )
    try:
        traj = odesolve(
            adjoint_field, state, t_end, t_start, config, breakpoints, False
        )
    except NumericalError as exc:
        raise GradientError(f"The adjoint solve failed: {exc}") from exc
    return float(value.detach()), traj.final[4]


def discretize_grads(
    model: SdeModel,
    path: BrownianApprox,
    probe: Optional[TraceProbe],
    loss: LossFunc,
    start,
    config: SolveConfig,
) -> Tuple[float, torch.Tensor]:
    """
    (loss, gradient) by backpropagating through every solver step.

    Memory grows with the number of steps, since the whole unrolled solve
    stays on the tape.
    """
    theta = model.params.detach().clone().requires_grad_(True)
    try:
        final = wz_solve(
            model.with_params(theta),
            path,
            start,
            config,
            probe,
            augmented=True,
            create_graph=True,
        )
        value = loss(final.z, final.delta_logp)
        if not value.requires_grad:
            return float(value.detach()), torch.zeros_like(theta).detach()
        (grads,) = torch.autograd.grad(value, theta, allow_unused=True)
    except MemoryError as exc:
        raise ResourceError(
            f"Out of memory unrolling the solve: {exc}"
        ) from exc
    except RuntimeError as exc:
        if "memory" in str(exc).lower():
            raise ResourceError(
                f"Out of memory unrolling the solve: {exc}"
            ) from exc
        raise
    except NumericalError as exc:
        raise GradientError(f"The unrolled solve failed: {exc}") from exc
    if grads is None:
        grads = torch.zeros_like(theta)
    return float(value.detach()), grads.detach()


def l1_penalty(
    model: SdeModel, params: torch.Tensor, weight: float
) -> Tuple[float, torch.Tensor]:
    """
    weight·‖w‖₁ over the diffusion network's weights, and its subgradient
    weight·sign(w) (zero at zero).
    """
    mask = torch.as_tensor(model.diffusion_weight_mask())
    if weight == 0.0 or not bool(mask.any()):
        return 0.0, torch.zeros_like(params)
    weights = params * mask
    value = weight * float(torch.sum(torch.abs(weights)))
    return value, weight * torch.sign(weights)


def _draw_path(
    config: TrainConfig,
    model: SdeModel,
    horizon: float,
    rng: np.random.Generator,
) -> BrownianApprox:
    if config.path_kind == "kl":
        return sample_kl(model.noise_dim, config.kl_order, horizon, rng)
    grid = uniform_grid(config.intervals, horizon)
    return sample_pl(model.noise_dim, grid, rng)


def _batch_paths(
    config: TrainConfig,
    model: SdeModel,
    horizon: float,
    batch: int,
    rng: np.random.Generator,
) -> List[BrownianApprox]:
    if config.per_sample_paths:
        return [
            stack_paths(
                [_draw_path(config, model, horizon, rng) for _ in range(batch)]
            )
            for _ in range(config.paths_per_batch)
        ]
    return [
        _draw_path(config, model, horizon, rng)
        for _ in range(config.paths_per_batch)
    ]


def _gradient(
    config: TrainConfig,
    model: SdeModel,
    paths: List[BrownianApprox],
    loss: LossFunc,
    start: torch.Tensor,
    solve_config: SolveConfig,
    probe_rng: np.random.Generator,
) -> Tuple[float, torch.Tensor]:
    if config.grad_mode == "adjoint":
        grads_fn = adjoint_grads
    else:
        grads_fn = discretize_grads
    total_loss = 0.0
    total_grad = torch.zeros_like(model.params).detach()
    for path in paths:
        probe = dynamics.choose_probe(
            model.dim,
            probe_rng,
            divergence=config.divergence,
            distribution=config.probe_distribution,
            count=config.probe_count,
            batch=start.shape[0],
            resample=config.probe_resample,
        )
        value, grads = grads_fn(model, path, probe, loss, start, solve_config)
        total_loss += value
        total_grad = total_grad + grads
    return total_loss / len(paths), total_grad / len(paths)


def _run(
    model: SdeModel,
    config: TrainConfig,
    step: Callable[[SdeModel, np.random.Generator], Tuple[float, Any]],
    on_iteration: Optional[Callable[[Metrics], None]],
) -> Tuple[SdeModel, List[Metrics]]:
    """The loop shared by both objectives."""
    rng = make_rng(config.seed, BATCH_STREAM)
    params = model.params.detach().clone()
    state = AdagradState.like(params)
    history: List[Metrics] = []
    last_good = model
    start_time = _clock()
    for iteration in range(config.iterations):
        current = model.with_params(params)
        try:
            value, grads = step(current, rng)
        except NumericalError as exc:
            raise TrainingAborted(
                f"Training stopped at iteration {iteration}: {exc}",
                model=last_good,
                history=history,
            ) from exc
        penalty, penalty_grad = l1_penalty(current, params, config.l1_weight)
        value += penalty
        grads = grads + penalty_grad
        grad_norm = float(torch.linalg.norm(grads))
        if not (np.isfinite(value) and np.isfinite(grad_norm)):
            logger.warning(f"Non-finite loss at iteration {iteration}")
            raise TrainingAborted(
                f"The loss became non-finite at iteration {iteration}",
                model=last_good,
                history=history,
            )
        last_good = current
        params = adagrad_step(params, grads, state, config.lr)
        metrics = {
            "iter": iteration,
            "loss": value,
            "grad_norm": grad_norm,
            "wall_ms": round((_clock() - start_time) * 1000.0, 3),
        }
        history.append(metrics)
        logger.debug(
            f"Iteration {iteration}: loss {value:.6g}, "
            + f"grad norm {grad_norm:.3g}"
        )
        if on_iteration is not None:
            on_iteration(metrics)
    return model.with_params(params), history


def train_mle(
    data,
    model: SdeModel,
    config: TrainConfig,
    solve_config: SolveConfig,
    horizon: float = 1.0,
    on_iteration: Optional[Callable[[Metrics], None]] = None,
) -> Tuple[SdeModel, List[Metrics]]:
    """
    Fit `model` to `data` by minimizing the negative mean single-path
    log-density of each minibatch.

    Each minibatch gets fresh paths and probes.  `on_iteration` is called
    with each iteration's metrics.
    """
    data = as_tensor(data).detach()
    n = data.shape[0]
    reverse = attr.evolve(solve_config, direction="reverse")
    probe_rng = make_rng(config.seed, PROBE_STREAM)

    def loss(z0, delta):
        return -torch.mean(dynamics.base_logprob(z0) - delta)

    def step(current: SdeModel, rng: np.random.Generator):
        size = min(config.batch_size, n)
        rows = rng.choice(n, size=size, replace=False)
        batch = data[torch.as_tensor(np.sort(rows))]
        paths = _batch_paths(config, current, horizon, size, rng)
        return _gradient(
            config, current, paths, loss, batch, reverse, probe_rng
        )

    logger.info(
        f"Training on {n} samples, batch size {config.batch_size}, "
        + f"{config.iterations} iterations"
    )
    return _run(model, config, step, on_iteration)


def train_kl_target(
    target_logdensity: Callable[[torch.Tensor], torch.Tensor],
    model: SdeModel,
    config: TrainConfig,
    solve_config: SolveConfig,
    horizon: float = 1.0,
    on_iteration: Optional[Callable[[Metrics], None]] = None,
) -> Tuple[SdeModel, List[Metrics]]:
    """
    Fit `model` so that its time-T law matches a target known up to a
    constant, by minimizing E[log p_T(Z_T) - log p(Z_T)] over forward
    samples, plus the L1 penalty.
    """
    forward = attr.evolve(solve_config, direction="forward")
    probe_rng = make_rng(config.seed, PROBE_STREAM)

    def step(current: SdeModel, rng: np.random.Generator):
        z0 = as_tensor(rng.standard_normal((config.batch_size, current.dim)))
        start_logp = dynamics.base_logprob(z0)

        def loss(z_end, delta):
            logp_end = start_logp + delta
            return torch.mean(logp_end - target_logdensity(z_end))

        paths = _batch_paths(config, current, horizon, z0.shape[0], rng)
        return _gradient(config, current, paths, loss, z0, forward, probe_rng)

    logger.info(
        f"Training towards the target, batch size {config.batch_size}, "
        + f"{config.iterations} iterations"
    )
    return _run(model, config, step, on_iteration)
