"""
Reverse-mode differentiation.

This is a thin layer over torch's autograd, which records the tape of
primitive operations as tensors are computed.  Everything here works on
64-bit dense tensors.

The functions nest: when `x` is already part of a recorded computation (it
requires grad), the derivative is itself recorded, so a function whose body
calls `grad` or `vjp` can be differentiated again.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ArgumentError, ContractError, UnsupportedOperation

logger = logging.getLogger(__name__)

DTYPE = torch.float64

TensorFunc = Callable[[torch.Tensor], torch.Tensor]


def as_tensor(value) -> torch.Tensor:
    """Convert `value` to a float64 tensor, leaving float64 tensors alone."""
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def _attach(x) -> tuple:
    """
    Get `x` ready for differentiation.

    Returns the tensor to differentiate against, and whether derivatives
    should themselves be recorded (because `x` belongs to an outer tape).
    """
    x = as_tensor(x)
    if x.requires_grad:
        return x, True
    return x.detach().requires_grad_(True), False


def _derivative(
    y: torch.Tensor, x: torch.Tensor, v: torch.Tensor, create_graph: bool
) -> torch.Tensor:
    if not y.requires_grad:
        # y doesn't depend on x at all.
        return torch.zeros_like(x)
    (result,) = torch.autograd.grad(
        y, x, grad_outputs=v, create_graph=create_graph, allow_unused=True
    )
    if result is None:
        return torch.zeros_like(x)
    return result


def vjp(
    func: TensorFunc,
    x,
    v,
    create_graph: Optional[bool] = None,
) -> torch.Tensor:
    """
    The vector-Jacobian product vᵀ (∂func/∂x) at `x`.

    `v` must have the shape of ``func(x)``.  `create_graph` defaults to
    recording the result only when `x` is already on a tape.
    """
    x, nested = _attach(x)
    create_graph = nested if create_graph is None else create_graph
    with torch.enable_grad():
        y = func(x)
        v = as_tensor(v)
        if v.shape != y.shape:
            raise ArgumentError(
                f"v has shape {tuple(v.shape)}, "
                + f"but the function returns {tuple(y.shape)}"
            )
        return _derivative(y, x, v, create_graph)


def grad(
    func: TensorFunc, x, create_graph: Optional[bool] = None
) -> torch.Tensor:
    """The gradient of the scalar function `func` at `x`."""
    x, nested = _attach(x)
    create_graph = nested if create_graph is None else create_graph
    with torch.enable_grad():
        y = func(x)
        if y.numel() != 1:
            raise ContractError(
                f"grad needs a scalar function, got shape {tuple(y.shape)}"
            )
        return _derivative(y, x, torch.ones_like(y), create_graph)


def jvp(
    func: TensorFunc, x, u, create_graph: Optional[bool] = None
) -> torch.Tensor:
    """
    The Jacobian-vector product (∂func/∂x) u, by two reverse passes.
    """
    x, nested = _attach(x)
    create_graph = nested if create_graph is None else create_graph
    u = as_tensor(u)
    if u.shape != x.shape:
        raise ArgumentError(
            f"u has shape {tuple(u.shape)}, but x has {tuple(x.shape)}"
        )
    with torch.enable_grad():
        y = func(x)
        # w is a dummy cotangent: vjp is linear in w, so differentiating
        # wᵀJ·u with respect to w gives Ju.
        w = torch.zeros_like(y, requires_grad=True)
        if not y.requires_grad:
            return torch.zeros_like(y)
        (pulled,) = torch.autograd.grad(y, x, w, create_graph=True)
        (pushed,) = torch.autograd.grad(
            pulled, w, u, create_graph=create_graph, allow_unused=True
        )
    return torch.zeros_like(y) if pushed is None else pushed


def hvp(func: TensorFunc, x, v) -> torch.Tensor:
    """The Hessian-vector product of the scalar function `func`."""
    v = as_tensor(v)
    return nested_grad(lambda y: torch.sum(grad(func, y) * v), x)


def nested_grad(func: TensorFunc, x) -> torch.Tensor:
    """
    The gradient of a scalar function whose body takes derivatives itself.

    Inner calls to `grad`, `vjp` or `jvp` see `x` on the tape and record
    their results, so this returns the second-order contraction.
    """
    try:
        return grad(func, x)
    except RuntimeError as exc:
        raise UnsupportedOperation(
            f"Can't differentiate through this function: {exc}"
        ) from exc


_ACTIVATIONS = {
    "tanh": torch.tanh,
    "softplus": F.softplus,
    "identity": lambda x: x,
}

# Not twice differentiable, so not usable in a vector field.
_NOT_SMOOTH = {"relu", "leaky_relu", "hardtanh", "abs", "elu", "relu6"}


def activation(name: str) -> TensorFunc:
    """Look up an activation function by name."""
    if name in _NOT_SMOOTH:
        raise UnsupportedOperation(
            f"Activation {name!r} isn't smooth enough; "
            + "use 'tanh' or 'softplus'"
        )
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ArgumentError(f"Unknown activation {name!r}") from None
