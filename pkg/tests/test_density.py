"""Tests of snflow/density.py"""

import logging
import math

import numpy as np
import pytest
import torch

from snflow import nets
from snflow.ad import as_tensor
from snflow.density import (
    density_grid,
    elbo_bound,
    lattice,
    logdensity_mc,
    logdensity_single_path,
    sample_forward,
    write_grid_csv,
)
from snflow.dynamics import SdeModel
from snflow.exceptions import ArgumentError, EstimationError
from snflow.paths import BrownianApprox, sample_kl
from snflow.solve import SolveConfig
from snflow.util import make_rng, read_csv

from .helpers import check_logs

TIGHT = SolveConfig(method="adaptive", rtol=1e-9, atol=1e-9)


def normal_logpdf(x, variance):
    return -0.5 * x**2 / variance - 0.5 * math.log(2 * math.pi * variance)


def ou(sigma, lam=1.0):
    """dZ = -Z dt + sigma dB, started from the standard normal."""
    return SdeModel(
        dim=1,
        noise_dim=1,
        sigma=[[sigma]],
        drift_fn=lambda z, t, p: -z,
        lam=lam,
    )


def test_deterministic_linear_flow():
    # Without noise, Z_T = exp(-T) Z_0, so p_T is N(0, exp(-2T)).
    path = sample_kl(1, 4, 1.5, make_rng(1))
    x = np.array([[0.0], [0.3], [-0.8]])
    logp = logdensity_single_path(ou(1.0, lam=0.0), path, x, TIGHT)
    expected = normal_logpdf(x[:, 0], math.exp(-3.0))
    assert np.allclose(logp.numpy(), expected, atol=1e-6)


def test_constant_diffusion_conditional():
    # Given the path, Z_T = Z_0 + B_T: a unit normal around the endpoint.
    model = SdeModel(dim=2, noise_dim=2)
    path = sample_kl(2, 5, 1.0, make_rng(2))
    x = np.array([0.4, -0.1])
    logp = logdensity_single_path(model, path, x, TIGHT)
    shift = x - path.eval(1.0)
    expected = normal_logpdf(shift, 1.0).sum()
    assert float(logp) == pytest.approx(expected, abs=1e-6)


def test_ou_marginal_density():
    sigma = 0.5
    model = ou(sigma)
    rng = make_rng(3)
    paths = [sample_kl(1, 8, 0.5, rng) for _ in range(400)]
    x = np.array([[0.0], [0.5], [-0.5]])
    # Started from N(0, 1), Z_T is normal with variance
    # exp(-2T) + sigma^2 (1 - exp(-2T)) / 2, here with T = 1/2.
    config = SolveConfig(method="adaptive", rtol=1e-7, atol=1e-7)
    estimate = logdensity_mc(model, paths, x, config)
    decay = math.exp(-1.0)
    variance = decay + sigma**2 * (1 - decay) / 2
    expected = normal_logpdf(x[:, 0], variance)
    assert estimate.kind == "log-mean-exp"
    assert estimate.n_paths == 400
    assert estimate.failures == 0
    assert estimate.conditional.shape == (400, 3)
    assert np.allclose(estimate.aggregate, expected, atol=0.05)


def test_ou_marginal_density_unit_noise():
    # dZ = -Z dt + dB to T = 1 with 8 KL terms.  Every point gets 20000
    # paths of its own, solved together as one bundle.
    count = 20000
    x = np.array([[0.0], [1.0], [-1.0]])
    bundle = sample_kl(1, 8, 1.0, make_rng(50), size=3 * count)
    logp = logdensity_single_path(
        ou(1.0), bundle, np.repeat(x, count, axis=0), SolveConfig(steps=200)
    )
    per_point = logp.reshape(3, count)
    estimate = torch.logsumexp(per_point, dim=1) - math.log(count)
    decay = math.exp(-2.0)
    expected = normal_logpdf(x[:, 0], decay + (1 - decay) / 2)
    assert np.allclose(estimate.numpy(), expected, atol=0.05)


def ou_kl_mean(omega):
    """
    The mean of Z_1 given a KL path with coefficients `omega`, for
    dZ = -Z dt + dB started from the standard normal.
    """
    k = np.arange(omega.shape[-1])
    weights = math.sqrt(2) * ((-1.0) ** k - math.exp(-1.0)) / (
        1 + (k * math.pi) ** 2
    )
    weights[0] = 1 - math.exp(-1.0)
    return omega @ weights


def test_conditional_density_converges_in_kl_order():
    # Truncations of one 512-term path: the conditional law of Z_1 is
    # N(mean, exp(-2)), and its mean converges as terms are added.
    orders = [2, 4, 8, 16, 32]
    x = np.array([[0.0], [1.0], [-1.0]])
    rng = make_rng(51)
    errors = np.zeros((10, len(orders)))
    for replicate in range(10):
        full = sample_kl(1, 512, 1.0, rng)
        mean = ou_kl_mean(full.omega[0])
        exact = normal_logpdf(x[:, 0] - mean, math.exp(-2.0))
        for j, order in enumerate(orders):
            path = BrownianApprox("kl", 1.0, full.omega[:, :order])
            logp = logdensity_single_path(ou(1.0), path, x, TIGHT)
            errors[replicate, j] = np.max(np.abs(logp.numpy() - exact))
    medians = np.median(errors, axis=0)
    assert np.all(np.diff(medians) <= 0)
    assert medians[-1] < 0.02


def test_constant_coefficient_conditional():
    # With constant drift and diffusion, Z_1 = Z_0 + mu + S B_1 given the
    # path, so the conditional law is N(mu + S B_1, I).
    mu = as_tensor([0.3, -0.2])
    sigma = np.array([[1.0, 0.2], [0.0, 0.5]])
    model = SdeModel(
        dim=2,
        noise_dim=2,
        sigma=sigma,
        drift_fn=lambda z, t, p: torch.zeros_like(z) + mu,
    )
    x = np.array([[0.5, 0.5], [-1.0, 0.2], [2.0, -1.5]])
    config = SolveConfig(method="adaptive", rtol=1e-8, atol=1e-8)
    rng = make_rng(52)
    for _ in range(5):
        path = sample_kl(2, 6, 1.0, rng)
        shift = x - mu.numpy() - sigma @ path.eval(1.0)
        expected = normal_logpdf(shift, 1.0).sum(axis=1)
        logp = logdensity_single_path(model, path, x, config)
        assert np.allclose(logp.numpy(), expected, atol=1e-5)


def test_estimates_repeat_exactly():
    def run():
        rng = make_rng(53)
        paths = [sample_kl(1, 8, 1.0, rng) for _ in range(16)]
        x = np.array([[0.0], [1.0], [-1.0]])
        return logdensity_mc(ou(1.0), paths, x, SolveConfig())

    first, second = run(), run()
    assert np.array_equal(first.conditional, second.conditional)
    assert np.array_equal(first.aggregate, second.aggregate)


def test_bound_is_below_estimate():
    model = ou(1.0)
    rng = make_rng(4)
    paths = [sample_kl(1, 4, 1.0, rng) for _ in range(10)]
    x = np.array([[0.0], [1.0]])
    estimate = logdensity_mc(model, paths, x, SolveConfig())
    bound = elbo_bound(model, paths, x, SolveConfig())
    assert bound.kind == "mean-bound"
    assert np.all(bound.aggregate <= estimate.aggregate + 1e-12)
    assert np.allclose(bound.conditional, estimate.conditional)
    assert np.allclose(bound.aggregate, estimate.conditional.mean(axis=0))


def test_single_point_estimate():
    rng = make_rng(5)
    paths = [sample_kl(1, 4, 1.0, rng) for _ in range(4)]
    estimate = logdensity_mc(ou(1.0), paths, [0.2], SolveConfig())
    assert estimate.conditional.shape == (4,)
    assert estimate.aggregate.shape == ()


def test_workers_agree():
    rng = make_rng(6)
    paths = [sample_kl(1, 4, 1.0, rng) for _ in range(6)]
    x = np.array([[0.1], [0.7]])
    one = logdensity_mc(ou(1.0), paths, x, SolveConfig(), workers=1)
    three = logdensity_mc(ou(1.0), paths, x, SolveConfig(), workers=3)
    assert np.array_equal(one.conditional, three.conditional)


def flow_model():
    drift_spec = nets.preset("drift-4x64", dim=2)
    diffusion_spec = nets.preset("offdiag-2x64", dim=2)
    params = np.concatenate(
        [nets.init(drift_spec, 7, 1), nets.init(diffusion_spec, 7, 2)]
    )
    return SdeModel(
        dim=2,
        noise_dim=2,
        structure="offdiag",
        params=params,
        drift_spec=drift_spec,
        diffusion_spec=diffusion_spec,
        lam=0.5,
    )


def test_forward_and_reverse_agree():
    model = flow_model()
    path = sample_kl(2, 4, 1.0, make_rng(7))
    z_end, logp = sample_forward(model, path, TIGHT, rng=make_rng(8), count=3)
    assert z_end.shape == (3, 2)
    back = logdensity_single_path(model, path, z_end, TIGHT)
    assert torch.allclose(back, logp, atol=1e-6)


def test_sample_forward_needs_a_start():
    path = sample_kl(1, 4, 1.0, make_rng(9))
    with pytest.raises(ArgumentError, match="Need z0 or an rng"):
        sample_forward(ou(1.0), path, SolveConfig())


def test_sample_forward_given_start():
    path = sample_kl(1, 4, 1.0, make_rng(10))
    z0 = as_tensor([[0.0], [1.0]])
    z_end, logp = sample_forward(ou(1.0, lam=0.0), path, TIGHT, z0=z0)
    assert np.allclose(z_end.numpy(), z0.numpy() * math.exp(-1.0))
    # The flow contracts by exp(-1), which adds 1 to the log-density.
    expected = normal_logpdf(z0.numpy()[:, 0], 1.0) + 1.0
    assert np.allclose(logp.numpy(), expected, atol=1e-7)


def exploding():
    """Backwards in time, dz/dt = 10 z^3 runs off to infinity."""
    return SdeModel(
        dim=1, noise_dim=1, drift_fn=lambda z, t, p: -10.0 * z**3, lam=0.0
    )


def test_failed_solve_is_an_estimation_error():
    path = sample_kl(1, 4, 1.0, make_rng(11))
    with pytest.raises(EstimationError, match="Couldn't solve") as info:
        logdensity_single_path(exploding(), path, [5.0], SolveConfig())
    assert info.value.diagnostics == {"cause": "DivergenceError"}


def test_all_paths_failing():
    rng = make_rng(12)
    paths = [sample_kl(1, 4, 1.0, rng) for _ in range(2)]
    with pytest.raises(EstimationError, match="All 2 paths failed") as info:
        logdensity_mc(exploding(), paths, [5.0], SolveConfig())
    assert info.value.diagnostics == {"paths": 2, "failures": 2}


def test_some_paths_failing(mocker, caplog):
    caplog.set_level(logging.WARNING, logger="snflow")
    real = logdensity_single_path
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise EstimationError("The log-density came out non-finite")
        return real(*args, **kwargs)

    mocker.patch("snflow.density.logdensity_single_path", side_effect=flaky)
    rng = make_rng(13)
    paths = [sample_kl(1, 4, 1.0, rng) for _ in range(3)]
    estimate = logdensity_mc(ou(1.0), paths, [0.5], SolveConfig())
    assert estimate.n_paths == 3
    assert estimate.failures == 1
    assert estimate.conditional.shape == (2,)
    check_logs(
        caplog,
        [("snflow.density", logging.WARNING, "Dropped 1 of 3 failed paths")],
    )


def test_no_paths():
    with pytest.raises(ArgumentError, match="at least one path"):
        logdensity_mc(ou(1.0), [], [0.0], SolveConfig())


def test_lattice():
    xs, ys, points = lattice([-1, 1, 0, 2], [3, 2])
    assert np.array_equal(xs, [-1.0, 0.0, 1.0])
    assert np.array_equal(ys, [0.0, 2.0])
    assert points.shape == (6, 2)
    # Row by row from the bottom.
    assert np.array_equal(points[:3, 1], [0.0, 0.0, 0.0])
    assert np.array_equal(points[3:, 0], xs)


@pytest.mark.parametrize(
    "extent, resolution",
    [([1, -1, 0, 1], [2, 2]), ([0, 1, 0, 1], [0, 2])],
)
def test_bad_lattice(extent, resolution):
    with pytest.raises(ArgumentError, match="Bad lattice"):
        lattice(extent, resolution)


def test_density_grid(temp_dir):
    model = SdeModel(dim=2, noise_dim=2)
    rng = make_rng(13)
    paths = [sample_kl(2, 4, 1.0, rng) for _ in range(3)]
    points, logp = density_grid(
        model, paths, [-2, 2, -1, 1], [4, 3], SolveConfig()
    )
    assert points.shape == (12, 2)
    assert logp.shape == (12,)
    assert np.all(np.isfinite(logp))
    write_grid_csv("density.csv", points, logp)
    header, values = read_csv("density.csv")
    assert header == ["x", "y", "logp"]
    assert values.shape == (12, 3)
    assert np.array_equal(values[:, 2], logp)


def test_density_grid_needs_2d():
    path = sample_kl(1, 4, 1.0, make_rng(14))
    with pytest.raises(ArgumentError, match="2-D models"):
        density_grid(ou(1.0), [path], [0, 1, 0, 1], [2, 2], SolveConfig())
