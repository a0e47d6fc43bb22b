"""Snflow configuration."""

from __future__ import annotations

import configparser
import contextlib
import logging
from pathlib import Path
from types import ModuleType
from typing import Any, Dict, Iterable, Optional, Tuple

import attr

from .exceptions import ConfigError
from .util import FLAG_KEYS, PathLike, non_negative, positive

logger = logging.getLogger(__name__)

tomllib: Optional[ModuleType]

try:
    try:
        import tomllib  # type: ignore[no-redef]
    except ModuleNotFoundError:
        import tomli as tomllib  # type: ignore[no-redef]
except ImportError:
    tomllib = None

yaml: Optional[ModuleType]

try:
    import yaml  # type: ignore[no-redef]
except ImportError:
    yaml = None


EXPERIMENTS = ["banana", "star", "cauchy", "normal", "custom"]
DIFFUSIONS = ["constant", "diagonal", "full", "offdiag", "drift-diag"]


@attr.s
class RunOptions:
    """What to run, where to put it, and how to seed it."""

    experiment = attr.ib(
        type=str,
        default="banana",
        validator=attr.validators.in_(EXPERIMENTS),
        metadata={
            "doc": """\
                The experiment: a data set to fit ("banana", "star", "custom")
                or a target density for a targeted diffusion ("cauchy",
                "normal").
                """,
        },
    )

    output_dir = attr.ib(
        type=str,
        default="snflow-out",
        converter=str,
        metadata={
            "doc": """\
                The directory for checkpoints, metrics and other artifacts.
                It is created if it doesn't exist.
                """,
        },
    )

    seed = attr.ib(
        type=int,
        default=0,
        converter=int,
        validator=non_negative,
        metadata={"doc": "The seed that determines every random draw."},
    )

    threads = attr.ib(
        type=int,
        default=1,
        converter=int,
        validator=positive,
        metadata={
            "doc": """\
                The number of worker threads for Monte-Carlo density estimates
                and for torch itself.
                """,
        },
    )

    data_size = attr.ib(
        type=int,
        default=10000,
        converter=int,
        validator=positive,
        metadata={"doc": "How many training samples to draw from the target."},
    )

    heldout_size = attr.ib(
        type=int,
        default=1000,
        converter=int,
        validator=non_negative,
        metadata={
            "doc": "How many held-out samples to draw for evaluating the fit.",
        },
    )

    data_file = attr.ib(
        type=str,
        default="",
        converter=str,
        metadata={
            "doc": """\
                A CSV data set with header x_1,...,x_d, used by the "custom"
                experiment.
                """,
            "doc_default": "(empty)",
        },
    )


@attr.s
class ModelOptions:
    """The drift and diffusion of the stochastic flow."""

    dim = attr.ib(
        type=int,
        default=0,
        converter=int,
        validator=non_negative,
        metadata={
            "doc": """\
                The state dimension.  0 uses the experiment's own dimension.
                """,
        },
    )

    drift_preset = attr.ib(
        type=str,
        default="drift-4x64",
        converter=str,
        metadata={"doc": "The network architecture for the drift."},
    )

    diffusion = attr.ib(
        type=str,
        default="offdiag",
        validator=attr.validators.in_(DIFFUSIONS),
        metadata={
            "doc": """\
                The diffusion structure: "constant" (the identity), "diagonal",
                "full", "offdiag" (two learned off-diagonal entries, 2-D only)
                or "drift-diag" (the drift on the diagonal).
                """,
        },
    )

    diffusion_preset = attr.ib(
        type=str,
        default="offdiag-2x64",
        converter=str,
        metadata={
            "doc": """\
                The network architecture for a learned diffusion.  Ignored by
                the "constant" and "drift-diag" structures.
                """,
        },
    )

    lam = attr.ib(
        type=float,
        default=1.0,
        converter=float,
        validator=non_negative,
        metadata={
            "doc": """\
                The scale of the diffusion.  0 turns the model into a
                deterministic continuous normalizing flow.
                """,
        },
    )

    activation = attr.ib(
        type=str,
        default="tanh",
        validator=attr.validators.in_(["tanh", "softplus"]),
        metadata={"doc": "The hidden-layer activation: tanh or softplus."},
    )

    horizon = attr.ib(
        type=float,
        default=1.0,
        converter=float,
        validator=positive,
        metadata={"doc": "The time horizon T of the flow."},
    )

    interpretation = attr.ib(
        type=str,
        default="ito",
        validator=attr.validators.in_(["ito", "stratonovich"]),
        metadata={
            "doc": """\
                How the SDE is read.  An Ito model gets a drift correction
                before it is driven by a smooth path.
                """,
        },
    )

    convention = attr.ib(
        type=str,
        default="zero-flux",
        validator=attr.validators.in_(["zero-flux", "literal"]),
        metadata={
            "doc": """\
                For targeted diffusions, the drift formula: "zero-flux" makes
                the target stationary, "literal" is the alternative display
                kept for comparison.
                """,
        },
    )


@attr.s
class PathOptions:
    """How Brownian paths are approximated."""

    kind = attr.ib(
        type=str,
        default="kl",
        validator=attr.validators.in_(["kl", "pl"]),
        metadata={
            "doc": """\
                "kl" for the truncated Karhunen-Loeve bridge series, "pl" for
                exact simulation on a grid with linear interpolation.
                """,
        },
    )

    order = attr.ib(
        type=int,
        default=6,
        converter=int,
        validator=positive,
        metadata={"doc": "The number of Karhunen-Loeve terms."},
    )

    intervals = attr.ib(
        type=int,
        default=20,
        converter=int,
        validator=positive,
        metadata={"doc": "The number of grid intervals for \"pl\" paths."},
    )


@attr.s
class SolveOptions:
    """How the random ODEs are integrated."""

    method = attr.ib(
        type=str,
        default="rk4",
        validator=attr.validators.in_(["rk4", "adaptive"]),
        metadata={
            "doc": """\
                "rk4" for fixed-step Runge-Kutta, "adaptive" for Dormand-Prince
                with error control.
                """,
        },
    )

    steps = attr.ib(
        type=int,
        default=20,
        converter=int,
        validator=positive,
        metadata={"doc": "The number of rk4 steps over the horizon."},
    )

    rtol = attr.ib(
        type=float,
        default=1e-6,
        converter=float,
        validator=positive,
        metadata={"doc": "Relative tolerance of the adaptive solver."},
    )

    atol = attr.ib(
        type=float,
        default=1e-6,
        converter=float,
        validator=positive,
        metadata={"doc": "Absolute tolerance of the adaptive solver."},
    )

    eval_tolerance = attr.ib(
        type=float,
        default=1e-8,
        converter=float,
        validator=positive,
        metadata={
            "doc": """\
                The adaptive tolerance used when evaluating densities rather
                than training.
                """,
        },
    )

    knot_alignment = attr.ib(
        type=bool,
        default=True,
        converter=attr.converters.to_bool,
        metadata={
            "doc": "Keep solver steps from straddling \"pl\" path knots.",
        },
    )

    divergence = attr.ib(
        type=str,
        default="auto",
        validator=attr.validators.in_(["auto", "exact", "probe"]),
        metadata={
            "doc": """\
                How the divergence is computed: "exact", "probe" (Hutchinson
                estimate) or "auto" (exact up to 8 dimensions).
                """,
        },
    )

    probe_distribution = attr.ib(
        type=str,
        default="rademacher",
        validator=attr.validators.in_(["rademacher", "gaussian"]),
        metadata={"doc": "The distribution of the trace probes."},
    )

    probe_count = attr.ib(
        type=int,
        default=1,
        converter=int,
        validator=positive,
        metadata={"doc": "The number of trace probes."},
    )

    probe_resample = attr.ib(
        type=bool,
        default=False,
        converter=attr.converters.to_bool,
        metadata={
            "doc": "Draw fresh probes at every field evaluation.",
        },
    )


@attr.s
class TrainOptions:
    """How models are trained."""

    lr = attr.ib(
        type=float,
        default=0.1,
        converter=float,
        validator=positive,
        metadata={"doc": "The Adagrad learning rate."},
    )

    iterations = attr.ib(
        type=int,
        default=2000,
        converter=int,
        validator=non_negative,
        metadata={"doc": "The number of optimizer steps."},
    )

    batch_size = attr.ib(
        type=int,
        default=1000,
        converter=int,
        validator=positive,
        metadata={"doc": "The number of samples in each minibatch."},
    )

    paths_per_batch = attr.ib(
        type=int,
        default=1,
        converter=int,
        validator=positive,
        metadata={
            "doc": """\
                The number of Brownian paths averaged in each minibatch loss.
                """,
        },
    )

    grad_mode = attr.ib(
        type=str,
        default="adjoint",
        validator=attr.validators.in_(["adjoint", "discretize"]),
        metadata={
            "doc": """\
                "adjoint" integrates the adjoint system backwards,
                "discretize" backpropagates through the solver steps.
                """,
        },
    )

    l1_weight = attr.ib(
        type=float,
        default=0.0,
        converter=float,
        validator=non_negative,
        metadata={
            "doc": "The weight of the L1 penalty on the diffusion network.",
        },
    )

    per_sample_paths = attr.ib(
        type=bool,
        default=False,
        converter=attr.converters.to_bool,
        metadata={
            "doc": """\
                Give every sample of a minibatch its own path instead of one
                shared path.
                """,
        },
    )


SECTIONS = {
    "run": RunOptions,
    "model": ModelOptions,
    "path": PathOptions,
    "solve": SolveOptions,
    "train": TrainOptions,
}


@contextlib.contextmanager
def validator_exceptions():
    """
    Context manager for attrs operations that validate or convert.

    Attrs reports problems as ValueError (or TypeError from a converter), and
    we want them raised as ConfigError.

    """
    try:
        yield
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"Invalid configuration: {exc.args[0]}") from exc


def _assign(values: Dict[str, Dict[str, Any]], key: str, value: Any) -> None:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"Unknown configuration key {key!r}")
    if name not in attr.fields_dict(SECTIONS[section]):
        raise ConfigError(f"Unknown configuration key {key!r}")
    values[section][name] = value


def parse_setting(text: str) -> Tuple[str, str]:
    """Split a ``section.key=value`` command-line setting."""
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"Settings look like section.key=value, not {text!r}")
    return key.strip(), value.strip()


@attr.s
class RunConfig:
    """
    Configuration for snflow.

    Five blocks of options, each read from a config file and then overridden
    by command-line settings.

    """

    run = attr.ib(type=RunOptions, factory=RunOptions)
    model = attr.ib(type=ModelOptions, factory=ModelOptions)
    path = attr.ib(type=PathOptions, factory=PathOptions)
    solve = attr.ib(type=SolveOptions, factory=SolveOptions)
    train = attr.ib(type=TrainOptions, factory=TrainOptions)

    @classmethod
    def read(
        cls,
        config_file: Optional[PathLike] = None,
        settings: Iterable[Tuple[str, Any]] = (),
        defaults: Iterable[Tuple[str, Any]] = (),
    ) -> RunConfig:
        """
        Read the configuration to use.

        `defaults` replace the built-in defaults.  `config_file` is read
        next, if given.  Then `settings`, pairs of ``section.key`` and value,
        are applied in order, so later ones win.

        """
        values: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
        for key, value in defaults:
            _assign(values, key, value)
        if config_file is not None:
            for key, value in read_config_file(config_file):
                _assign(values, key, value)
        for key, value in settings:
            _assign(values, key, value)
        with validator_exceptions():
            blocks = {
                name: SECTIONS[name](**values[name]) for name in SECTIONS
            }
        return cls(**blocks)

    @classmethod
    def from_command_line(
        cls,
        config_file: Optional[PathLike],
        settings: Iterable[str],
        flags: Dict[str, Any],
        defaults: Iterable[Tuple[str, Any]] = (),
    ) -> RunConfig:
        """
        The configuration for a command: its `defaults`, the file, then
        each ``--set``, then the named flags that were given.
        """
        pairs = [parse_setting(text) for text in settings]
        for name, value in flags.items():
            if value is not None:
                pairs.append((FLAG_KEYS[name], value))
        return cls.read(config_file, pairs, defaults=defaults)

    def items(self) -> Iterable[Tuple[str, Any]]:
        """All ``section.key`` names with their values."""
        for name in SECTIONS:
            block = getattr(self, name)
            for attrdef in attr.fields(SECTIONS[name]):
                yield f"{name}.{attrdef.name}", getattr(block, attrdef.name)

    def write(self, file_path: PathLike) -> None:
        """Write the configuration as an INI file that `read` accepts."""
        parser = configparser.ConfigParser()
        for key, value in self.items():
            section, _, name = key.partition(".")
            if not parser.has_section(section):
                parser.add_section(section)
            parser[section][name] = _format_value(value)
        with open(file_path, "w", encoding="utf-8") as f:
            parser.write(f)
        logger.debug(f"Wrote {file_path}")

    def solve_config(self, evaluation: bool = False):
        """The solver settings, with evaluation tolerances if `evaluation`."""
        from .solve import SolveConfig

        opts = self.solve
        tol_r = opts.eval_tolerance if evaluation else opts.rtol
        tol_a = opts.eval_tolerance if evaluation else opts.atol
        return SolveConfig(
            method=opts.method,
            steps=opts.steps,
            rtol=tol_r,
            atol=tol_a,
            knot_alignment=opts.knot_alignment,
        )

    def train_config(self):
        """The training settings."""
        from .train import TrainConfig

        opts = self.train
        return TrainConfig(
            lr=opts.lr,
            iterations=opts.iterations,
            batch_size=opts.batch_size,
            paths_per_batch=opts.paths_per_batch,
            kl_order=self.path.order,
            grad_mode=opts.grad_mode,
            l1_weight=opts.l1_weight,
            seed=self.run.seed,
            per_sample_paths=opts.per_sample_paths,
            path_kind=self.path.kind,
            intervals=self.path.intervals,
            divergence=self.solve.divergence,
            probe_distribution=self.solve.probe_distribution,
            probe_count=self.solve.probe_count,
            probe_resample=self.solve.probe_resample,
        )

    @staticmethod
    def describe() -> str:
        """
        A help epilog listing every configuration key and its default.

        The ``\\b`` lines keep click from re-wrapping the lists.
        """
        parts = ["Configuration keys, set with --set section.key=value:"]
        for name, options in SECTIONS.items():
            lines = ["\b"]
            for attrdef in attr.fields(options):
                default = attrdef.metadata.get("doc_default")
                if default is None:
                    default = _format_value(attrdef.default)
                lines.append(f"  {name}.{attrdef.name} = {default}")
            parts.append("\n".join(lines))
        return "\n\n".join(parts)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(config_file: PathLike) -> Iterable[Tuple[str, Any]]:
    """
    Read one configuration file as ``section.key``, value pairs.

    The format is chosen by suffix: .toml, .yaml or .yml, and INI for
    anything else.
    """
    config_path = Path(config_file)
    where = repr(str(config_path))
    logger.debug(f"Reading config file {config_path}")
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Couldn't read {where}: {exc}") from exc

    suffix = config_path.suffix.lower()
    if suffix == ".toml":
        if tomllib is None:
            raise ConfigError(
                f"Can't read {where} without TOML support. "
                + "Install with [toml] extra"
            )
        try:
            data = tomllib.loads(text)
        except ValueError as exc:
            raise ConfigError(f"Couldn't parse {where}: {exc}") from exc
    elif suffix in (".yaml", ".yml"):
        if yaml is None:
            raise ConfigError(
                f"Can't read {where} without YAML support. "
                + "Install with [yaml] extra"
            )
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"Couldn't parse {where}: {exc}") from exc
    else:
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text, source=str(config_path))
        except configparser.Error as exc:
            raise ConfigError(f"Couldn't parse {where}: {exc}") from exc
        data = {name: dict(parser[name]) for name in parser.sections()}

    if not isinstance(data, dict):
        raise ConfigError(f"{where} isn't a set of sections")
    for section, entries in data.items():
        if not isinstance(entries, dict):
            raise ConfigError(
                f"{where}: [{section}] isn't a set of keys"
            )
        for name, value in entries.items():
            yield f"{section}.{name}", value
