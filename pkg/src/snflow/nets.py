"""
Multilayer perceptrons over flat parameter vectors.

A network is described by an `MlpSpec` and evaluated against a flat vector
of parameters, so optimizers and the adjoint solver only ever deal with one
vector.  Each layer stores its weight matrix (fan_out x fan_in, row-major)
followed by its bias.
"""

from __future__ import annotations

import json
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import attr
import numpy as np
import torch

from .ad import activation as get_activation
from .ad import as_tensor
from .exceptions import ArgumentError
from .util import PathLike, make_rng

logger = logging.getLogger(__name__)

# Final-layer weights are shrunk by this much, so new flows are close to
# the identity.
FINAL_LAYER_SCALE = 1e-2


def _check_widths(instance, attribute, value) -> None:
    if len(value) < 3:
        raise ArgumentError(
            f"An MLP needs at least one hidden layer, got widths {value}"
        )
    if not all(w >= 1 for w in value):
        raise ArgumentError(f"Layer widths must be positive, got {value}")


@attr.s(frozen=True)
class MlpSpec:
    """
    The shape of a multilayer perceptron.

    `widths` runs from the input width to the output width.  When
    `time_input` is set, the input width counts t as one extra input.
    Hidden layers use `activation`, the final layer is linear.
    """

    widths = attr.ib(
        type=Tuple[int, ...],
        converter=lambda ws: tuple(int(w) for w in ws),
        validator=_check_widths,
    )
    activation = attr.ib(
        type=str,
        default="tanh",
        validator=attr.validators.in_(["tanh", "softplus"]),
    )
    time_input = attr.ib(type=bool, default=False, converter=bool)

    @property
    def in_dim(self) -> int:
        """The width of x, not counting t."""
        return self.widths[0] - (1 if self.time_input else 0)

    @property
    def out_dim(self) -> int:  # noqa: D102
        return self.widths[-1]

    def layers(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) for each weight layer."""
        return list(zip(self.widths[:-1], self.widths[1:]))

    def offsets(self) -> List[Tuple[int, int, int]]:
        """
        Where each layer lives in the flat vector.

        Each entry is (weight start, bias start, layer end).
        """
        table = []
        start = 0
        for fan_in, fan_out in self.layers():
            bias = start + fan_in * fan_out
            end = bias + fan_out
            table.append((start, bias, end))
            start = end
        return table

    @property
    def n_params(self) -> int:
        """The length of the flat parameter vector."""
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layers())

    def header(self) -> Dict[str, Any]:
        """A JSON-able description, including the offsets table."""
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "time_input": self.time_input,
            "offsets": [list(o) for o in self.offsets()],
        }

    @classmethod
    def from_header(cls, header: Dict[str, Any]) -> MlpSpec:
        """Rebuild a spec from `header`."""
        spec = cls(
            widths=header["widths"],
            activation=header.get("activation", "tanh"),
            time_input=header.get("time_input", False),
        )
        if "offsets" in header:
            if [list(o) for o in spec.offsets()] != header["offsets"]:
                raise ArgumentError("Network offsets don't match its widths")
        return spec


def init(spec: MlpSpec, seed: int, *stream: int) -> np.ndarray:
    """
    Initial parameters for `spec`.

    Weights are Glorot-uniform, biases are zero, and the final layer's
    weights are scaled down by FINAL_LAYER_SCALE.
    """
    rng = make_rng(seed, *stream)
    chunks = []
    n_layers = len(spec.layers())
    for i, (fan_in, fan_out) in enumerate(spec.layers()):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if i == n_layers - 1:
            weights *= FINAL_LAYER_SCALE
        chunks.append(weights.ravel())
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unflatten(spec: MlpSpec, params) -> List[Tuple[Any, Any]]:
    """Views of (weights, bias) per layer.  Works for arrays and tensors."""
    if params.shape != (spec.n_params,):
        raise ArgumentError(
            f"The network needs {spec.n_params} parameters, "
            + f"got shape {tuple(params.shape)}"
        )
    layers = []
    for (fan_in, fan_out), (start, bias, end) in zip(
        spec.layers(), spec.offsets()
    ):
        weights = params[start:bias].reshape(fan_out, fan_in)
        layers.append((weights, params[bias:end]))
    return layers


def flatten(layers: Sequence[Tuple[Any, Any]]):
    """The flat parameter vector for a list of (weights, bias)."""
    parts = []
    for weights, bias in layers:
        parts.extend([weights.reshape(-1), bias.reshape(-1)])
    if isinstance(parts[0], torch.Tensor):
        return torch.cat(parts)
    return np.concatenate(parts)


def weight_mask(spec: MlpSpec) -> np.ndarray:
    """True where the flat vector holds a weight rather than a bias."""
    mask = np.zeros(spec.n_params, dtype=bool)
    for start, bias, _ in spec.offsets():
        mask[start:bias] = True
    return mask


def forward(
    spec: MlpSpec, params, x, t: Optional[float] = None
) -> torch.Tensor:
    """
    Evaluate the network on `x`, one row per sample (or a single vector).

    `t` is appended to every row for time-dependent networks, and ignored
    otherwise.
    """
    x = as_tensor(x)
    params = as_tensor(params)
    single = x.dim() == 1
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 2 or x.shape[1] != spec.in_dim:
        raise ArgumentError(
            f"The network takes inputs of width {spec.in_dim}, "
            + f"got shape {tuple(x.shape)}"
        )
    if spec.time_input:
        if t is None:
            raise ArgumentError("This network needs a time input")
        column = torch.full((x.shape[0], 1), float(t), dtype=x.dtype)
        x = torch.cat([x, column], dim=1)

    act = get_activation(spec.activation)
    layers = unflatten(spec, params)
    h = x
    for i, (weights, bias) in enumerate(layers):
        h = h @ weights.T + bias
        if i < len(layers) - 1:
            h = act(h)
    return h[0] if single else h


PRESETS = ["drift-4x64", "offdiag-2x64", "cauchy-sigma-4x32"]
EXTRA_PRESETS = ["diagonal-2x64", "full-2x64"]


def preset(
    name: str,
    dim: int = 2,
    activation: str = "tanh",
    time_input: bool = False,
) -> MlpSpec:
    """
    The architecture used by an experiment.

    "drift-4x64" is four weight layers with 64 hidden units, "offdiag-2x64"
    is one hidden layer of 64 giving the two off-diagonal diffusion entries,
    and "cauchy-sigma-4x32" is the 1-D diffusion network of the Cauchy
    experiment.  "diagonal-2x64" and "full-2x64" size a one-hidden-layer net
    for the other diffusion structures.
    """
    if name == "drift-4x64":
        widths = [dim, 64, 64, 64, dim]
    elif name == "offdiag-2x64":
        widths = [dim, 64, 2]
    elif name == "cauchy-sigma-4x32":
        widths = [1, 32, 32, 32, 1]
    elif name == "diagonal-2x64":
        widths = [dim, 64, dim]
    elif name == "full-2x64":
        widths = [dim, 64, dim * dim]
    else:
        raise ArgumentError(
            f"Unknown network preset {name!r}, "
            + f"choose from {', '.join(PRESETS + EXTRA_PRESETS)}"
        )
    if time_input:
        widths[0] += 1
    return MlpSpec(widths, activation=activation, time_input=time_input)


def write_checkpoint(
    file_path: PathLike, params, header: Dict[str, Any]
) -> None:
    """
    Write a checkpoint: one JSON header line, then the parameters as
    little-endian 64-bit floats.
    """
    values = np.asarray(
        params.detach().numpy() if isinstance(params, torch.Tensor) else params,
        dtype="<f8",
    )
    header = dict(header, count=int(values.size))
    with open(file_path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(values.tobytes())
    logger.debug(f"Wrote {values.size} parameters to {file_path}")


def read_checkpoint(file_path: PathLike) -> Tuple[Dict[str, Any], np.ndarray]:
    """Read a checkpoint written by `write_checkpoint`."""
    with open(file_path, "rb") as f:
        first = f.readline()
        body = f.read()
    try:
        header = json.loads(first.decode("utf-8"))
    except ValueError as exc:
        raise ArgumentError(f"{file_path} has no checkpoint header") from exc
    if len(body) % 8:
        raise ArgumentError(f"{file_path} is truncated")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if values.size != header.get("count"):
        raise ArgumentError(
            f"{file_path} should have {header.get('count')} parameters, "
            + f"but has {values.size}"
        )
    return header, values
