"""Tests of snflow/config.py"""

import attr
import pytest

import snflow.config
from snflow.config import RunConfig, parse_setting, tomllib, yaml
from snflow.exceptions import ConfigError

from .helpers import without_module

INI_CONFIG = """\
[run]
experiment = star
seed = 7

[model]
lam = 0.5
diffusion = diagonal
diffusion_preset = diagonal-2x64

[solve]
knot_alignment = false
"""

TOML_CONFIG = """\
[run]
experiment = "cauchy"
seed = 3

[train]
lr = 0.05
l1_weight = 1e-4
"""

YAML_CONFIG = """\
run:
  experiment: normal
path:
  kind: pl
  intervals: 40
"""


def test_defaults():
    config = RunConfig.read()
    assert config.run.experiment == "banana"
    assert config.run.seed == 0
    assert config.model.dim == 0
    assert config.model.diffusion == "offdiag"
    assert config.path.kind == "kl"
    assert config.path.order == 6
    assert config.solve.method == "rk4"
    assert config.solve.knot_alignment is True
    assert config.train.lr == 0.1
    assert config.train.grad_mode == "adjoint"


def test_reading_ini(temp_dir):
    (temp_dir / "run.cfg").write_text(INI_CONFIG)
    config = RunConfig.read("run.cfg")
    assert config.run.experiment == "star"
    assert config.run.seed == 7
    assert config.model.lam == 0.5
    assert config.model.diffusion == "diagonal"
    assert config.solve.knot_alignment is False
    # Untouched keys keep their defaults.
    assert config.train.iterations == 2000


@pytest.mark.skipif(tomllib is None, reason="No TOML support installed")
def test_reading_toml(temp_dir):
    (temp_dir / "run.toml").write_text(TOML_CONFIG)
    config = RunConfig.read("run.toml")
    assert config.run.experiment == "cauchy"
    assert config.run.seed == 3
    assert config.train.lr == 0.05
    assert config.train.l1_weight == 1e-4


@pytest.mark.skipif(yaml is None, reason="No YAML support installed")
def test_reading_yaml(temp_dir):
    (temp_dir / "run.yaml").write_text(YAML_CONFIG)
    config = RunConfig.read("run.yaml")
    assert config.run.experiment == "normal"
    assert config.path.kind == "pl"
    assert config.path.intervals == 40


def test_no_toml_installed(temp_dir):
    (temp_dir / "run.toml").write_text(TOML_CONFIG)
    with without_module(snflow.config, "tomllib"):
        with pytest.raises(ConfigError, match="without TOML support"):
            RunConfig.read("run.toml")


def test_no_yaml_installed(temp_dir):
    (temp_dir / "run.yml").write_text(YAML_CONFIG)
    with without_module(snflow.config, "yaml"):
        with pytest.raises(ConfigError, match="without YAML support"):
            RunConfig.read("run.yml")


@pytest.mark.parametrize(
    "text, msg_rx",
    [
        ("[run]\nflavor = sweet\n", r"Unknown configuration key 'run.flavor'"),
        ("[cooking]\nseed = 1\n", r"Unknown configuration key 'cooking.seed'"),
        ("[run]\nseed = many\n", r"Invalid configuration: invalid literal"),
        ("[run]\nseed = -1\n", r"Invalid configuration: seed must be"),
        ("[model]\ndiffusion = wobbly\n", r"Invalid configuration: .*wobbly"),
        ("[path]\norder = 0\n", r"Invalid configuration: order must be"),
        ("[run\nseed = 1\n", r"Couldn't parse"),
    ],
)
def test_bad_config_files(temp_dir, text, msg_rx):
    (temp_dir / "run.cfg").write_text(text)
    with pytest.raises(ConfigError, match=msg_rx):
        RunConfig.read("run.cfg")


@pytest.mark.skipif(yaml is None, reason="No YAML support installed")
def test_yaml_must_have_sections(temp_dir):
    (temp_dir / "run.yaml").write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="isn't a set of sections"):
        RunConfig.read("run.yaml")
    (temp_dir / "run.yaml").write_text("run: 17\n")
    with pytest.raises(ConfigError, match=r"\[run\] isn't a set of keys"):
        RunConfig.read("run.yaml")


def test_missing_file(temp_dir):
    with pytest.raises(ConfigError, match="Couldn't read 'nothere.cfg'"):
        RunConfig.read("nothere.cfg")


@pytest.mark.parametrize(
    "text, result",
    [
        ("run.seed=3", ("run.seed", "3")),
        (" model.lam = 0.25 ", ("model.lam", "0.25")),
        ("run.output_dir=a=b", ("run.output_dir", "a=b")),
    ],
)
def test_parse_setting(text, result):
    assert parse_setting(text) == result


def test_parse_bad_setting():
    with pytest.raises(ConfigError, match="section.key=value"):
        parse_setting("run.seed")


def test_command_line_precedence(temp_dir):
    (temp_dir / "run.cfg").write_text(INI_CONFIG)
    config = RunConfig.from_command_line(
        "run.cfg",
        ["run.seed=11", "model.lam=0.75", "run.seed=12"],
        {"seed": 13, "iters": 5, "experiment": None},
    )
    # Flags beat --set, later --set beats earlier, and both beat the file.
    assert config.run.seed == 13
    assert config.model.lam == 0.75
    assert config.train.iterations == 5
    assert config.run.experiment == "star"


def test_write_and_read_back(temp_dir):
    config = RunConfig.read(
        settings=[
            ("run.experiment", "cauchy"),
            ("model.lam", 0.3),
            ("solve.probe_resample", True),
            ("train.l1_weight", 1e-4),
        ]
    )
    config.write("effective.cfg")
    assert RunConfig.read("effective.cfg") == config
    assert "probe_resample = true" in (temp_dir / "effective.cfg").read_text()


def test_items():
    items = dict(RunConfig.read().items())
    assert items["run.experiment"] == "banana"
    assert items["solve.eval_tolerance"] == 1e-8
    assert len(items) == sum(
        len(attr.fields(options))
        for options in snflow.config.SECTIONS.values()
    )


def test_describe():
    text = RunConfig.describe()
    assert text.startswith("Configuration keys, set with --set")
    assert "  model.dim = 0\n" in text
    assert "  solve.knot_alignment = true\n" in text
    assert "  run.data_file = (empty)\n" in text


def test_solve_config():
    config = RunConfig.read(
        settings=[("solve.method", "adaptive"), ("solve.rtol", "1e-5")]
    )
    training = config.solve_config()
    assert training.method == "adaptive"
    assert training.rtol == 1e-5
    assert training.atol == 1e-6
    evaluation = config.solve_config(evaluation=True)
    assert evaluation.rtol == evaluation.atol == 1e-8


def test_train_config():
    config = RunConfig.read(
        settings=[("path.order", 9), ("train.batch_size", 64)]
    )
    train = config.train_config()
    assert train.kl_order == 9
    assert train.batch_size == 64
    assert train.seed == 0
