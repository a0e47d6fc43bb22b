"""Tests of snflow/ad.py"""

import numpy as np
import pytest
import torch

from snflow.ad import (
    DTYPE,
    activation,
    as_tensor,
    grad,
    hvp,
    jvp,
    nested_grad,
    vjp,
)
from snflow.exceptions import (
    ArgumentError,
    ContractError,
    UnsupportedOperation,
)

A = [[1.0, 2.0, 0.0], [-1.0, 0.5, 3.0]]


def linear(x):
    return as_tensor(A) @ x


def test_as_tensor():
    assert as_tensor([1, 2]).dtype == DTYPE
    single = torch.ones(3, dtype=torch.float32)
    assert as_tensor(single).dtype == DTYPE
    double = torch.ones(3, dtype=DTYPE)
    assert as_tensor(double) is double


def test_grad():
    x = [0.5, -1.0, 2.0]
    g = grad(lambda x: torch.sum(x**3), x)
    assert np.allclose(g.numpy(), 3 * np.array(x) ** 2)
    assert not g.requires_grad


def test_grad_needs_scalar():
    with pytest.raises(ContractError, match="scalar"):
        grad(lambda x: x * 2, [1.0, 2.0])


def test_grad_of_constant():
    g = grad(lambda x: torch.tensor(3.0, dtype=DTYPE), [1.0, 2.0])
    assert np.array_equal(g.numpy(), [0.0, 0.0])


def test_vjp():
    v = [1.0, -2.0]
    result = vjp(linear, [0.1, 0.2, 0.3], v)
    assert np.allclose(result.numpy(), np.array(A).T @ np.array(v))


def test_vjp_shape_mismatch():
    with pytest.raises(ArgumentError, match="v has shape"):
        vjp(linear, [0.1, 0.2, 0.3], [1.0, 2.0, 3.0])


def test_jvp():
    u = [1.0, 0.0, -1.0]
    result = jvp(linear, [0.1, 0.2, 0.3], u)
    assert np.allclose(result.numpy(), np.array(A) @ np.array(u))


def test_jvp_nonlinear():
    x = np.array([0.3, -0.4])
    u = np.array([2.0, 1.0])
    result = jvp(torch.sin, x, u)
    assert np.allclose(result.numpy(), np.cos(x) * u)


def test_jvp_shape_mismatch():
    with pytest.raises(ArgumentError, match="u has shape"):
        jvp(linear, [0.1, 0.2, 0.3], [1.0])


def test_hvp():
    x = np.array([1.0, -2.0, 0.5])
    v = np.array([1.0, 1.0, 2.0])
    result = hvp(lambda x: torch.sum(x**4), x, v)
    assert np.allclose(result.numpy(), 12 * x**2 * v)


def test_nested_grad():
    # The body differentiates sin, so this is the gradient of cos²/2.
    x = np.array([0.2, 1.1])

    def half_square_of_gradient(y):
        return 0.5 * torch.sum(grad(lambda z: torch.sum(torch.sin(z)), y) ** 2)

    result = nested_grad(half_square_of_gradient, x)
    assert np.allclose(result.numpy(), -np.cos(x) * np.sin(x))


def test_nested_grad_through_numpy():
    with pytest.raises(UnsupportedOperation, match="Can't differentiate"):
        nested_grad(lambda x: as_tensor(x.numpy()).sum(), [1.0])


def test_activations():
    assert activation("tanh") is torch.tanh
    values = np.array([-1.0, 0.0, 2.0])
    x = as_tensor(values)
    softplus = activation("softplus")(x).numpy()
    assert np.allclose(softplus, np.log1p(np.exp(values)))
    assert activation("identity")(x) is x


@pytest.mark.parametrize("name", ["relu", "leaky_relu", "abs"])
def test_rough_activations(name):
    with pytest.raises(UnsupportedOperation, match="isn't smooth enough"):
        activation(name)


def test_unknown_activation():
    with pytest.raises(ArgumentError, match="Unknown activation 'swoosh'"):
        activation("swoosh")


def test_vjp_matches_finite_differences():
    def func(x):
        return torch.tanh(as_tensor(A) @ x) * torch.sum(x**2)

    x = np.array([0.3, -0.7, 1.1])
    v = np.array([0.4, -1.3])
    h = 1e-6
    expected = []
    for i in range(3):
        step = h * np.eye(3)[i]
        up = float(np.dot(v, func(as_tensor(x + step)).numpy()))
        down = float(np.dot(v, func(as_tensor(x - step)).numpy()))
        expected.append((up - down) / (2 * h))
    result = vjp(func, x, v).numpy()
    assert np.allclose(result, expected, rtol=1e-5, atol=1e-8)
