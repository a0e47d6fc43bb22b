"""
The vector field of a stochastic normalizing flow.

An Ito SDE dZ = mu(Z) dt + sigma(Z) dB driven by a smooth approximation of B
becomes an ordinary differential equation once the drift is corrected for
the Ito integral:

    dZ/dt = mu(Z) + c(Z) + sigma(Z) dB/dt

where c_i = -1/2 sum_jk d_j sigma_ik sigma_jk.  Adding the log-density change
-div F gives the augmented field that the solvers integrate.

Every function takes states as a batch, one row per sample; a single vector
is accepted too and gives unbatched results.
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Dict, Optional, Tuple

import attr
import numpy as np
import torch

from . import nets
from .ad import DTYPE, as_tensor
from .exceptions import ArgumentError, ConfigError, ContractError
from .paths import BrownianApprox

logger = logging.getLogger(__name__)

STRUCTURES = ["constant", "diagonal", "full", "offdiag", "drift-diag"]

# Divergences and Ito corrections are exact up to this many dimensions.
EXACT_DIM_LIMIT = 8

FieldFunc = Callable[[torch.Tensor, float, torch.Tensor], torch.Tensor]


def _check_structure(instance, attribute, value) -> None:
    if value not in STRUCTURES:
        raise ConfigError(
            f"Unknown diffusion structure {value!r}, "
            + f"choose from {', '.join(STRUCTURES)}"
        )


@attr.s(frozen=True, eq=False)
class SdeModel:
    """
    Drift and diffusion with one flat parameter vector.

    The drift is a network (`drift_spec`), a callable ``drift_fn(z, t,
    params)``, or zero when neither is given.  The diffusion has a
    `structure`:

    - "constant": `sigma` (the identity if not given).
    - "diagonal": the diffusion network's outputs on the diagonal.
    - "full": the diffusion network's outputs as a d x m matrix.
    - "offdiag": [[1, s1], [s2, 1]] from a network with two outputs, 2-D only.
    - "drift-diag": the drift itself on the diagonal.

    A ``diffusion_fn(z, t, params)`` returning d x m matrices replaces the
    network.  The whole diffusion is scaled by `lam`.  Network parameters are
    laid out drift first, then diffusion.  The initial distribution is
    always the standard normal.
    """

    dim = attr.ib(type=int, converter=int)
    noise_dim = attr.ib(type=int, converter=int)
    structure = attr.ib(
        type=str, default="constant", validator=_check_structure
    )
    params = attr.ib(type=torch.Tensor, default=(), converter=as_tensor)
    drift_spec = attr.ib(type=Optional[nets.MlpSpec], default=None)
    diffusion_spec = attr.ib(type=Optional[nets.MlpSpec], default=None)
    lam = attr.ib(type=float, default=1.0, converter=float)
    sigma = attr.ib(type=Optional[torch.Tensor], default=None)
    drift_fn = attr.ib(type=Optional[FieldFunc], default=None)
    diffusion_fn = attr.ib(type=Optional[FieldFunc], default=None)
    interpretation = attr.ib(
        type=str,
        default="ito",
        validator=attr.validators.in_(["ito", "stratonovich"]),
    )
    tag = attr.ib(type=Dict[str, Any], factory=dict)

    def __attrs_post_init__(self):  # noqa: D105
        d, m = self.dim, self.noise_dim
        if d < 1 or m < 1:
            raise ConfigError(f"Dimensions must be positive, got d={d}, m={m}")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be non-negative, not {self.lam}")
        if self.drift_spec is not None:
            spec = self.drift_spec
            if spec.in_dim != d or spec.out_dim != d:
                raise ConfigError(
                    f"A drift network for d={d} must map {d} -> {d}, "
                    + f"not {spec.in_dim} -> {spec.out_dim}"
                )
        if self.structure == "constant":
            if self.sigma is None:
                if d != m:
                    raise ConfigError(
                        "A constant diffusion without sigma needs m == d"
                    )
                sigma = torch.eye(d, dtype=DTYPE)
            else:
                sigma = as_tensor(self.sigma)
            if sigma.shape != (d, m):
                raise ConfigError(
                    f"sigma must be {d} x {m}, not {tuple(sigma.shape)}"
                )
            object.__setattr__(self, "sigma", sigma)
        elif self.structure in ("diagonal", "drift-diag") and d != m:
            raise ConfigError(f"A {self.structure} diffusion needs m == d")
        elif self.structure == "offdiag" and (d, m) != (2, 2):
            raise ConfigError("The offdiag diffusion is for d = m = 2 only")
        if self.structure in ("diagonal", "full", "offdiag"):
            self._check_diffusion_net()
        if self.drift_fn is None and self.diffusion_fn is None:
            expected = self.n_drift + self.n_diffusion
            if self.params.shape != (expected,):
                raise ConfigError(
                    f"The model needs {expected} parameters, "
                    + f"got shape {tuple(self.params.shape)}"
                )

    def _check_diffusion_net(self):
        if self.diffusion_fn is not None:
            return
        spec = self.diffusion_spec
        if spec is None:
            raise ConfigError(
                f"A {self.structure} diffusion needs a diffusion network"
            )
        d, m = self.dim, self.noise_dim
        outputs = {"diagonal": d, "full": d * m, "offdiag": 2}[self.structure]
        if spec.in_dim != d or spec.out_dim != outputs:
            raise ConfigError(
                f"A {self.structure} diffusion network must map "
                + f"{d} -> {outputs}, not {spec.in_dim} -> {spec.out_dim}"
            )

    @property
    def n_drift(self) -> int:
        """The number of drift-network parameters."""
        return 0 if self.drift_spec is None else self.drift_spec.n_params

    @property
    def n_diffusion(self) -> int:
        """The number of diffusion-network parameters."""
        if self.diffusion_spec is None:
            return 0
        return self.diffusion_spec.n_params

    @property
    def drift_params(self) -> torch.Tensor:  # noqa: D102
        return self.params[: self.n_drift]

    @property
    def diffusion_params(self) -> torch.Tensor:  # noqa: D102
        return self.params[self.n_drift : self.n_drift + self.n_diffusion]

    def diffusion_weight_mask(self) -> np.ndarray:
        """True at the diffusion network's weights in the flat vector."""
        mask = np.zeros(self.params.shape[0], dtype=bool)
        if self.diffusion_spec is not None:
            mask[self.n_drift :] = nets.weight_mask(self.diffusion_spec)
        return mask

    def with_params(self, params) -> SdeModel:
        """The same model with a new parameter vector."""
        return attr.evolve(self, params=params)

    @property
    def is_constant_diffusion(self) -> bool:
        """Whether sigma can't depend on the state."""
        return self.structure == "constant" and self.diffusion_fn is None


@attr.s
class TraceProbe:
    """
    Probe vectors for the Hutchinson divergence estimate.

    `vectors` has shape (count, batch, d).  Rademacher and Gaussian probes
    both have mean zero and identity covariance.  With `resample` set, each
    use draws fresh vectors from `rng`.
    """

    distribution = attr.ib(
        type=str, validator=attr.validators.in_(["rademacher", "gaussian"])
    )
    vectors = attr.ib(type=torch.Tensor, converter=as_tensor)
    resample = attr.ib(type=bool, default=False)
    rng = attr.ib(type=Optional[np.random.Generator], default=None)

    @property
    def count(self) -> int:  # noqa: D102
        return self.vectors.shape[0]

    def draw(self) -> torch.Tensor:
        """The vectors to use for one field evaluation."""
        if self.resample and self.rng is not None:
            self.vectors = _probe_values(
                self.distribution, self.vectors.shape, self.rng
            )
        return self.vectors


def _probe_values(distribution: str, shape, rng) -> torch.Tensor:
    if distribution == "rademacher":
        values = rng.choice([-1.0, 1.0], size=shape)
    else:
        values = rng.standard_normal(shape)
    return as_tensor(values)


def sample_probe(
    dim: int,
    rng: np.random.Generator,
    distribution: str = "rademacher",
    count: int = 1,
    batch: int = 1,
    resample: bool = False,
) -> TraceProbe:
    """Draw `count` probe vectors for each of `batch` samples."""
    if count < 1:
        raise ArgumentError(f"Need at least one probe, not {count}")
    vectors = _probe_values(distribution, (count, batch, dim), rng)
    kept_rng = rng if resample else None
    return TraceProbe(distribution, vectors, resample, kept_rng)


def choose_probe(
    dim: int,
    rng: np.random.Generator,
    divergence: str = "auto",
    distribution: str = "rademacher",
    count: int = 1,
    batch: int = 1,
    resample: bool = False,
) -> Optional[TraceProbe]:
    """
    A probe, or None when the divergence should be exact.

    "auto" is exact up to EXACT_DIM_LIMIT dimensions.
    """
    if divergence == "exact":
        return None
    if divergence == "auto" and dim <= EXACT_DIM_LIMIT:
        return None
    return sample_probe(dim, rng, distribution, count, batch, resample)


@attr.s(frozen=True, eq=False)
class AugmentedState:
    """A state with the log-density change accumulated along its path."""

    z = attr.ib(type=torch.Tensor, converter=as_tensor)
    delta_logp = attr.ib(type=torch.Tensor, converter=as_tensor)

    def is_finite(self) -> bool:  # noqa: D102
        return bool(
            torch.all(torch.isfinite(self.z))
            and torch.all(torch.isfinite(self.delta_logp))
        )


def _batched(z) -> Tuple[torch.Tensor, bool]:
    z = as_tensor(z)
    if z.dim() == 1:
        return z.unsqueeze(0), True
    if z.dim() != 2:
        raise ArgumentError(f"States must be d or B x d, not {tuple(z.shape)}")
    return z, False


def _unbatched(value: torch.Tensor, single: bool) -> torch.Tensor:
    return value[0] if single else value


def _auto_graph(model: SdeModel, z: torch.Tensor, create_graph) -> bool:
    if create_graph is not None:
        return create_graph
    return bool(z.requires_grad or model.params.requires_grad)


def drift(model: SdeModel, z, t: float = 0.0) -> torch.Tensor:
    """mu(z) at time `t`."""
    z, single = _batched(z)
    if model.drift_fn is not None:
        value = as_tensor(model.drift_fn(z, t, model.params))
        if value.shape != z.shape:
            raise ContractError(
                f"drift_fn returned shape {tuple(value.shape)}, "
                + f"not {tuple(z.shape)}"
            )
    elif model.drift_spec is not None:
        value = nets.forward(model.drift_spec, model.drift_params, z, t)
    else:
        value = torch.zeros_like(z)
    return _unbatched(value, single)


def diffusion_matrix(model: SdeModel, z, t: float = 0.0) -> torch.Tensor:
    """sigma(z), d x m for each row of `z`."""
    z, single = _batched(z)
    batch, d, m = z.shape[0], model.dim, model.noise_dim
    if z.shape[1] != d:
        raise ArgumentError(f"States must have {d} columns, not {z.shape[1]}")
    structure = model.structure
    if model.diffusion_fn is not None:
        sigma = as_tensor(model.diffusion_fn(z, t, model.params))
        if sigma.shape != (batch, d, m):
            raise ContractError(
                f"diffusion_fn returned shape {tuple(sigma.shape)}, "
                + f"not {(batch, d, m)}"
            )
    elif structure == "constant":
        sigma = model.sigma.expand(batch, d, m)
    elif structure == "drift-diag":
        sigma = torch.diag_embed(drift(model, z, t))
    else:
        out = nets.forward(
            model.diffusion_spec, model.diffusion_params, z, t
        )
        if structure == "diagonal":
            sigma = torch.diag_embed(out)
        elif structure == "full":
            sigma = out.reshape(batch, d, m)
        else:
            ones = torch.ones(batch, dtype=out.dtype)
            sigma = torch.stack(
                [
                    torch.stack([ones, out[:, 0]], dim=-1),
                    torch.stack([out[:, 1], ones], dim=-1),
                ],
                dim=-2,
            )
    return _unbatched(model.lam * sigma, single)


def _jvp_rows(
    y: torch.Tensor, x: torch.Tensor, u: torch.Tensor, create_graph: bool
) -> torch.Tensor:
    """Per-row Jacobian-vector products (dy_b/dx_b) u_b."""
    if not y.requires_grad:
        return torch.zeros_like(y)
    w = torch.zeros_like(y, requires_grad=True)
    (pulled,) = torch.autograd.grad(
        y, x, w, create_graph=True, allow_unused=True
    )
    if pulled is None:
        return torch.zeros_like(y)
    (pushed,) = torch.autograd.grad(
        pulled, w, u, create_graph=create_graph, allow_unused=True
    )
    return torch.zeros_like(y) if pushed is None else pushed


def _ito_term(
    model: SdeModel,
    z: torch.Tensor,
    t: float,
    probe: Optional[TraceProbe],
    create_graph: bool,
) -> torch.Tensor:
    """-1/2 sum_jk d_j sigma_ik(x) sigma_jk(x*) at x = x* = z."""
    if model.is_constant_diffusion or model.lam == 0:
        return torch.zeros_like(z)
    with torch.enable_grad():
        x = z if z.requires_grad else z.detach().requires_grad_(True)
        if probe is None or model.dim <= EXACT_DIM_LIMIT:
            sigma = diffusion_matrix(model, x, t)
            total = torch.zeros_like(z)
            for k in range(model.noise_dim):
                column = sigma[:, :, k]
                total = total + _jvp_rows(column, x, column, create_graph)
        else:
            # x_inner is differentiated; sigma at z is the held copy.
            x_inner = x.clone()
            held = diffusion_matrix(model, x, t)
            total = torch.zeros_like(z)
            vectors = probe.draw()
            for eps in vectors:
                eps = eps.expand_as(z)
                inner = torch.einsum("bjk,bj->bk", held, eps)
                y = torch.einsum(
                    "bik,bk->bi", diffusion_matrix(model, x_inner, t), inner
                )
                total = total + _jvp_rows(y, x_inner, eps, create_graph)
            total = total / vectors.shape[0]
    result = -0.5 * total
    return result if create_graph else result.detach()


def ito_correction(
    model: SdeModel,
    z,
    t: float = 0.0,
    probe: Optional[TraceProbe] = None,
    create_graph: Optional[bool] = None,
) -> torch.Tensor:
    """
    The drift correction that turns the Ito SDE into a Stratonovich one.

    It is zero for models declared as Stratonovich.  Above EXACT_DIM_LIMIT
    dimensions, a given `probe` replaces the exact sum by an estimate.
    """
    z, single = _batched(z)
    if model.interpretation == "stratonovich":
        return _unbatched(torch.zeros_like(z), single)
    create_graph = _auto_graph(model, z, create_graph)
    return _unbatched(_ito_term(model, z, t, probe, create_graph), single)


def ito_drift(model: SdeModel, z, t: float = 0.0) -> torch.Tensor:
    """The drift of the model read as an Ito SDE, for Ito integrators."""
    z, single = _batched(z)
    mu = drift(model, z, t)
    if model.interpretation == "stratonovich":
        mu = mu - _ito_term(model, z, t, None, _auto_graph(model, z, None))
    return _unbatched(mu, single)


def _path_rate(path: BrownianApprox, t: float, batch: int) -> torch.Tensor:
    rate = as_tensor(path.deriv(t))
    if rate.dim() == 1:
        return rate.expand(batch, rate.shape[0])
    if rate.shape[0] != batch:
        raise ArgumentError(
            f"A bundle of {rate.shape[0]} paths can't drive {batch} states"
        )
    return rate


def wz_field(
    model: SdeModel,
    path: BrownianApprox,
    t: float,
    z,
    probe: Optional[TraceProbe] = None,
    create_graph: Optional[bool] = None,
) -> torch.Tensor:
    """
    The random ODE field: drift, Ito correction and sigma times dB/dt.
    """
    z, single = _batched(z)
    if path.dim != model.noise_dim:
        raise ArgumentError(
            f"The path has {path.dim} dimensions, the noise has "
            + f"{model.noise_dim}"
        )
    create_graph = _auto_graph(model, z, create_graph)
    rate = _path_rate(path, t, z.shape[0])
    value = drift(model, z, t)
    value = value + ito_correction(model, z, t, probe, create_graph)
    if model.lam != 0:
        sigma = diffusion_matrix(model, z, t)
        value = value + torch.einsum("bik,bk->bi", sigma, rate)
    return _unbatched(value, single)


def _divergence_of(
    f: torch.Tensor,
    z: torch.Tensor,
    probe: Optional[TraceProbe],
    create_graph: bool,
) -> torch.Tensor:
    if not f.requires_grad:
        return torch.zeros(z.shape[0], dtype=z.dtype)
    total = torch.zeros(z.shape[0], dtype=z.dtype)
    if probe is None:
        for i in range(z.shape[1]):
            (g,) = torch.autograd.grad(
                f[:, i].sum(),
                z,
                create_graph=create_graph,
                retain_graph=True,
                allow_unused=True,
            )
            if g is not None:
                total = total + g[:, i]
        return total
    vectors = probe.draw()
    for eps in vectors:
        eps = eps.expand_as(z)
        (g,) = torch.autograd.grad(
            (f * eps).sum(),
            z,
            create_graph=create_graph,
            retain_graph=True,
            allow_unused=True,
        )
        if g is not None:
            total = total + (g * eps).sum(dim=1)
    return total / vectors.shape[0]


def divergence(
    field: Callable[[torch.Tensor], torch.Tensor],
    z,
    probe: Optional[TraceProbe] = None,
    create_graph: bool = False,
) -> torch.Tensor:
    """
    The divergence of `field` at each row of `z`.

    Exact (one reverse pass per dimension) without a probe, otherwise the
    mean over probes of eps . grad(eps . f).
    """
    z, single = _batched(z)
    with torch.enable_grad():
        x = z if z.requires_grad else z.detach().requires_grad_(True)
        f = field(x)
        if f.shape != x.shape:
            raise ContractError(
                f"The field returned shape {tuple(f.shape)}, "
                + f"not {tuple(x.shape)}"
            )
        value = _divergence_of(f, x, probe, create_graph)
    if not create_graph:
        value = value.detach()
    return _unbatched(value, single)


def augmented_field(
    model: SdeModel,
    path: BrownianApprox,
    probe: Optional[TraceProbe],
    t: float,
    z,
    create_graph: Optional[bool] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (dz/dt, d delta_logp/dt): the field and minus its divergence.

    The probe is used for the divergence (and for the Ito correction above
    EXACT_DIM_LIMIT dimensions); None means exact.
    """
    z, single = _batched(z)
    create_graph = _auto_graph(model, z, create_graph)
    with torch.enable_grad():
        x = z if z.requires_grad else z.detach().requires_grad_(True)
        # The divergence differentiates the field, so the field's own
        # derivatives must be on the tape.
        f = wz_field(model, path, t, x, probe, create_graph=True)
        rate = -_divergence_of(f, x, probe, create_graph)
    if not create_graph:
        f, rate = f.detach(), rate.detach()
    return _unbatched(f, single), _unbatched(rate, single)


def base_logprob(z) -> torch.Tensor:
    """The standard-normal log-density of each row of `z`."""
    z, single = _batched(z)
    normal = torch.distributions.Normal(
        torch.zeros((), dtype=DTYPE), torch.ones((), dtype=DTYPE)
    )
    return _unbatched(normal.log_prob(z).sum(dim=-1), single)
