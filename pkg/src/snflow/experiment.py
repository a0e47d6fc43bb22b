"""Central Experiment class."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import nets, targets
from .ad import as_tensor
from .config import RunConfig
from .density import DensityEstimate, density_grid, logdensity_mc
from .dynamics import SdeModel
from .exceptions import ArgumentError, ConfigError
from .paths import BrownianApprox, sample_kl, sample_pl, uniform_grid
from .train import Metrics, train_kl_target, train_mle
from .util import PathLike, make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "snflow-checkpoint"
CHECKPOINT_VERSION = 1

# Random streams derived from the run seed.  Training uses its own.
DATA_STREAM = 10
HELDOUT_STREAM = 11
DRIFT_INIT_STREAM = 20
DIFFUSION_INIT_STREAM = 21
EVAL_PATH_STREAM = 30
SAMPLE_STREAM = 40
CHAIN_STREAM = 41
SAMPLE_PATH_STREAM = 42

TARGETED = ["cauchy", "normal"]


class Experiment:
    """Public API to the snflow application."""

    def __init__(self, *, config: Optional[RunConfig] = None):
        """Create a new Experiment."""
        if config is None:
            self.config = RunConfig.read()
        else:
            self.config = config
        self._data: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def name(self) -> str:  # noqa: D102
        return self.config.run.experiment

    @property
    def is_targeted(self) -> bool:
        """Whether this experiment trains a diffusion towards a target."""
        return self.name in TARGETED

    def output_dir(self) -> Path:
        """The output directory, created if needed."""
        path = Path(self.config.run.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def target(self) -> Optional[targets.TargetSpec]:
        """The experiment's target distribution, None for custom data."""
        if self.name == "custom":
            return None
        return targets.get_target(self.name)

    def data(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        The training and held-out samples.

        Targets with a sampler draw them from the run seed.  The "custom"
        experiment reads `run.data_file` and holds out its last rows.
        """
        if self._data is not None:
            return self._data
        run = self.config.run
        if self.name == "custom":
            if not run.data_file:
                raise ConfigError(
                    "The custom experiment needs run.data_file to be set"
                )
            try:
                samples = targets.read_dataset(run.data_file)
            except OSError as exc:
                raise ConfigError(
                    f"Couldn't read {run.data_file!r}: {exc}"
                ) from exc
            held = min(run.heldout_size, samples.shape[0] - 1)
            cut = samples.shape[0] - held
            self._data = (samples[:cut], samples[cut:])
        else:
            target = targets.get_target(self.name)
            train = target.sample(
                make_rng(run.seed, DATA_STREAM), run.data_size
            )
            heldout = target.sample(
                make_rng(run.seed, HELDOUT_STREAM), run.heldout_size
            )
            self._data = (train, heldout)
        logger.debug(
            f"Data for {self.name}: {self._data[0].shape[0]} training, "
            + f"{self._data[1].shape[0]} held-out samples"
        )
        return self._data

    def dim(self) -> int:
        """The state dimension: model.dim, or the experiment's own."""
        if self.name == "custom":
            natural = self.data()[0].shape[1]
        else:
            natural = targets.get_target(self.name).dim
        wanted = self.config.model.dim
        if wanted and wanted != natural:
            raise ConfigError(
                f"model.dim is {wanted}, but the {self.name} experiment "
                + f"has {natural} dimensions"
            )
        return natural

    def _diffusion_preset(self) -> str:
        opts = self.config.model
        default = "offdiag-2x64"
        if opts.diffusion_preset == default and opts.diffusion != "offdiag":
            return f"{opts.diffusion}-2x64"
        return opts.diffusion_preset

    def build_model(self, params=None) -> SdeModel:
        """
        A freshly initialized model for this experiment, or one with
        `params` if given.
        """
        opts = self.config.model
        seed = self.config.run.seed
        if self.is_targeted:
            return targets.ergodic_sde(
                self.name,
                convention=opts.convention,
                seed=seed,
                activation=opts.activation,
                params=params,
            )
        dim = self.dim()
        drift_spec = _preset(opts.drift_preset, dim, opts.activation)
        diffusion_spec = None
        if opts.diffusion in ("diagonal", "full", "offdiag"):
            diffusion_spec = _preset(
                self._diffusion_preset(), dim, opts.activation
            )
        if params is None:
            parts = [nets.init(drift_spec, seed, DRIFT_INIT_STREAM)]
            if diffusion_spec is not None:
                parts.append(
                    nets.init(diffusion_spec, seed, DIFFUSION_INIT_STREAM)
                )
            params = np.concatenate(parts)
        model = SdeModel(
            dim=dim,
            noise_dim=dim,
            structure=opts.diffusion,
            params=params,
            drift_spec=drift_spec,
            diffusion_spec=diffusion_spec,
            lam=opts.lam,
            interpretation=opts.interpretation,
        )
        logger.debug(
            f"Built a {opts.diffusion} model with {model.params.shape[0]} "
            + "parameters"
        )
        return model

    def train(
        self,
        model: Optional[SdeModel] = None,
        on_iteration: Optional[Callable[[Metrics], None]] = None,
    ) -> Tuple[SdeModel, List[Metrics]]:
        """Train a model (a fresh one by default) on this experiment."""
        if model is None:
            model = self.build_model()
        train_config = self.config.train_config()
        solve_config = self.config.solve_config()
        horizon = self.config.model.horizon
        logger.info(
            f"Experiment {self.name}, seed {self.config.run.seed}, "
            + f"batch size {train_config.batch_size}"
        )
        if self.is_targeted:
            target = targets.get_target(self.name)
            return train_kl_target(
                target.logdensity,
                model,
                train_config,
                solve_config,
                horizon=horizon,
                on_iteration=on_iteration,
            )
        data, _ = self.data()
        return train_mle(
            data,
            model,
            train_config,
            solve_config,
            horizon=horizon,
            on_iteration=on_iteration,
        )

    def paths(
        self, model: SdeModel, count: int, stream: int = EVAL_PATH_STREAM
    ) -> List[BrownianApprox]:
        """`count` independent paths to drive `model`, from the run seed."""
        rng = make_rng(self.config.run.seed, stream)
        opts = self.config.path
        horizon = self.config.model.horizon
        dim = model.noise_dim
        if opts.kind == "kl":
            return [
                sample_kl(dim, opts.order, horizon, rng) for _ in range(count)
            ]
        grid = uniform_grid(opts.intervals, horizon)
        return [sample_pl(dim, grid, rng) for _ in range(count)]

    def logdensity(self, model: SdeModel, x, n_paths: int) -> DensityEstimate:
        """Monte-Carlo log-density of `model` at `x`."""
        return logdensity_mc(
            model,
            self.paths(model, n_paths),
            x,
            self.config.solve_config(evaluation=True),
            workers=self.config.run.threads,
            divergence=self.config.solve.divergence,
            probe_seed=self.config.run.seed,
        )

    def heldout_nll(self, model: SdeModel, n_paths: int = 1) -> float:
        """The mean negative log-density of the held-out samples."""
        _, heldout = self.data()
        if heldout.shape[0] == 0:
            raise ConfigError("There are no held-out samples to evaluate")
        estimate = self.logdensity(model, heldout, n_paths)
        return -float(np.mean(estimate.aggregate))

    def density_grid(
        self,
        model: SdeModel,
        extent,
        resolution,
        n_paths: int,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Monte-Carlo log-densities over a lattice."""
        return density_grid(
            model,
            self.paths(model, n_paths),
            extent,
            resolution,
            self.config.solve_config(evaluation=True),
            workers=self.config.run.threads,
            divergence=self.config.solve.divergence,
        )

    def save_model(self, model: SdeModel, file_path: PathLike) -> None:
        """Write a checkpoint of `model`."""
        header = model_header(model)
        header["experiment"] = self.name
        header["horizon"] = self.config.model.horizon
        nets.write_checkpoint(file_path, model.params, header)
        logger.info(f"Wrote checkpoint {file_path}")

    def load_model(self, file_path: PathLike) -> SdeModel:
        """
        Read a checkpoint written by `save_model`.

        The checkpoint's experiment and horizon replace the configured ones.
        """
        try:
            header, values = nets.read_checkpoint(file_path)
        except (OSError, ArgumentError) as exc:
            raise ConfigError(
                f"Couldn't read checkpoint {str(file_path)!r}: {exc}"
            ) from exc
        model = model_from_header(header, values)
        if "experiment" in header:
            self.config.run.experiment = header["experiment"]
            self._data = None
        if "horizon" in header:
            self.config.model.horizon = float(header["horizon"])
        return model


def configure(
    config_file: Optional[PathLike],
    settings: Sequence[str],
    flags: Dict[str, Any],
    defaults: Sequence[Tuple[str, Any]] = (),
) -> Experiment:
    """Build the Experiment for a command from its options."""
    config = RunConfig.from_command_line(
        config_file, settings, flags, defaults=defaults
    )
    torch.set_num_threads(config.run.threads)
    return Experiment(config=config)


def _preset(name: str, dim: int, activation: str) -> nets.MlpSpec:
    try:
        return nets.preset(name, dim=dim, activation=activation)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _spec_header(spec: Optional[nets.MlpSpec]) -> Optional[Dict[str, Any]]:
    return None if spec is None else spec.header()


def _spec_from(header: Optional[Dict[str, Any]]) -> Optional[nets.MlpSpec]:
    return None if header is None else nets.MlpSpec.from_header(header)


def model_header(model: SdeModel) -> Dict[str, Any]:
    """A JSON-able description of everything but the parameter values."""
    header: Dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dim": model.dim,
        "noise_dim": model.noise_dim,
        "structure": model.structure,
        "lam": model.lam,
        "interpretation": model.interpretation,
        "drift": _spec_header(model.drift_spec),
        "diffusion": _spec_header(model.diffusion_spec),
        "tag": dict(model.tag),
    }
    if model.structure == "constant":
        header["sigma"] = model.sigma.numpy().tolist()
    return header


def model_from_header(header: Dict[str, Any], values) -> SdeModel:
    """Rebuild a model from a checkpoint header and its parameters."""
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("This isn't an snflow checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"Can't read checkpoint version {header.get('version')}"
        )
    tag = header.get("tag") or {}
    if "ergodic" in tag:
        return targets.ergodic_sde(
            tag["ergodic"],
            convention=tag.get("convention", "zero-flux"),
            params=values,
            spec=_spec_from(header["diffusion"]),
        )
    sigma = header.get("sigma")
    return SdeModel(
        dim=header["dim"],
        noise_dim=header["noise_dim"],
        structure=header["structure"],
        params=values,
        drift_spec=_spec_from(header["drift"]),
        diffusion_spec=_spec_from(header["diffusion"]),
        lam=header["lam"],
        sigma=None if sigma is None else as_tensor(sigma),
        interpretation=header["interpretation"],
        tag=tag,
    )
