"""Tests of the snflow commands."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from snflow.config import RunConfig
from snflow.exceptions import TrainingAborted
from snflow.experiment import Experiment
from snflow.util import read_csv

SMALL = ["--set", "run.data_size=60", "--set", "run.heldout_size=10"]

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture()
def no_clock(mocker):
    """Freeze the training clock so metrics are reproducible."""
    mocker.patch("snflow.train._clock", return_value=0.0)


def train_small(cli_invoke, output, *more):
    cli_invoke(
        ["train", "--iters", "2", "--batch-size", "20", "--output", output]
        + SMALL
        + list(more)
    )


def test_train_writes_artifacts(cli_invoke, temp_dir, no_clock):
    train_small(cli_invoke, "out", "--seed", "3")
    out = temp_dir / "out"
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert sorted(first) == ["grad_norm", "iter", "loss", "wall_ms"]
    assert first["iter"] == 0
    assert first["wall_ms"] == 0.0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iters"] == 2
    assert summary["seed"] == 3
    assert summary["final_loss"] == json.loads(lines[1])["loss"]
    effective = RunConfig.read(out / "effective.cfg")
    assert effective.run.seed == 3
    assert effective.train.iterations == 2
    assert (out / "model.ckpt").exists()


def test_train_is_deterministic(cli_invoke, temp_dir, no_clock):
    train_small(cli_invoke, "one", "--seed", "5")
    train_small(cli_invoke, "two", "--seed", "5")
    for name in ["metrics.jsonl", "model.ckpt", "summary.json"]:
        one = (temp_dir / "one" / name).read_bytes()
        assert one == (temp_dir / "two" / name).read_bytes()


def test_train_from_config_file(cli_invoke, temp_dir):
    (temp_dir / "run.cfg").write_text(
        "[run]\noutput_dir = fromfile\n\n[model]\ndiffusion = constant\n"
    )
    cli_invoke(
        ["train", "--config", "run.cfg", "--iters", "1", "--batch-size", "10"]
        + SMALL
    )
    effective = RunConfig.read(temp_dir / "fromfile" / "effective.cfg")
    assert effective.model.diffusion == "constant"


@pytest.mark.parametrize(
    "args, msg",
    [
        (["--set", "run.flavor=sweet"], "Unknown configuration key"),
        (["--set", "run.seed"], "section.key=value"),
        (["--set", "model.diffusion=wobbly"], "Invalid configuration"),
        (["--experiment", "moon"], "Invalid configuration"),
    ],
)
def test_train_bad_configuration(cli_invoke, args, msg):
    result = cli_invoke(["train"] + args, expect_ok=False)
    assert result.exit_code == 2
    assert "Configuration error: " in result.output
    assert msg in result.output


def test_train_aborted(cli_invoke, temp_dir, mocker):
    model = Experiment().build_model()
    mocker.patch(
        "snflow.experiment.Experiment.train",
        side_effect=TrainingAborted(
            "The loss became non-finite at iteration 0", model=model
        ),
    )
    result = cli_invoke(["train", "--output", "out"], expect_ok=False)
    assert result.exit_code == 3
    assert "Numerical failure: The loss became non-finite" in result.output
    summary = json.loads((temp_dir / "out" / "summary.json").read_text())
    assert summary == {"final_loss": None, "iters": 0, "seed": 0}
    assert (temp_dir / "out" / "model.ckpt").exists()


def test_density(cli_invoke, temp_dir):
    train_small(cli_invoke, "out", "--iters", "0")
    cli_invoke(
        [
            "density",
            "--checkpoint",
            "out/model.ckpt",
            "--extent",
            "-2",
            "2",
            "-1",
            "1",
            "--resolution",
            "4",
            "3",
            "--paths",
            "2",
            "--output",
            "out",
            "--render",
        ]
    )
    header, values = read_csv(temp_dir / "out" / "density.csv")
    assert header == ["x", "y", "logp"]
    assert values.shape == (12, 3)
    assert np.all(np.isfinite(values[:, 2]))
    assert values[0, :2].tolist() == [-2.0, -1.0]
    assert values[-1, :2].tolist() == [2.0, 1.0]
    image = (temp_dir / "out" / "density.pgm").read_bytes()
    assert image.startswith(b"P5\n4 3\n255\n")


def test_density_needs_checkpoint(cli_invoke):
    result = cli_invoke(
        ["density", "--checkpoint", "nothere.ckpt"], expect_ok=False
    )
    assert result.exit_code == 2
    assert "nothere.ckpt" in result.output


def test_sample_generate(cli_invoke, temp_dir):
    train_small(cli_invoke, "out", "--iters", "0")
    args = ["sample", "--checkpoint", "out/model.ckpt", "--count", "25"]
    cli_invoke(args + ["--output", "out", "--render"])
    header, values = read_csv(temp_dir / "out" / "samples.csv")
    assert header == ["x_1", "x_2"]
    assert values.shape == (25, 2)
    svg = (temp_dir / "out" / "samples.svg").read_text()
    assert svg.count("<circle") == 25
    # Samples come from the run seed.
    cli_invoke(args + ["--output", "again"])
    _, again = read_csv(temp_dir / "again" / "samples.csv")
    assert np.array_equal(values, again)


def test_mcmc_opt_and_chain(cli_invoke, temp_dir):
    cli_invoke(["mcmc-opt", "--iters", "0", "--points", "11", "--output", "m"])
    header, values = read_csv(temp_dir / "m" / "sigma.csv")
    assert header == ["x", "sigma", "reference"]
    assert values.shape == (11, 3)
    assert values[0, 0] == -5.0
    assert np.all(values[:, 1] > 0)
    assert np.allclose(values[:, 2], np.sqrt(1 + values[:, 0] ** 2))
    checkpoint = json.loads(
        (temp_dir / "m" / "model.ckpt").read_bytes().split(b"\n")[0]
    )
    assert checkpoint["experiment"] == "cauchy"

    cli_invoke(
        [
            "sample",
            "--checkpoint",
            "m/model.ckpt",
            "--mode",
            "chain",
            "--count",
            "50",
            "--burn-in",
            "10",
            "--bins",
            "5",
            "--output",
            "m",
            "--render",
        ]
    )
    header, values = read_csv(temp_dir / "m" / "chain.csv")
    assert header == ["t", "x_1"]
    assert values.shape == (50, 2)
    assert values[0, 0] == pytest.approx(0.11)
    header, hist = read_csv(temp_dir / "m" / "histogram.csv")
    assert header == ["center", "count", "density", "reference"]
    assert hist.shape == (5, 4)
    assert np.allclose(hist[:, 3], 1 / (math.pi * (1 + hist[:, 0] ** 2)))
    assert "<polyline" in (temp_dir / "m" / "chain.svg").read_text()


def test_mcmc_opt_normal(cli_invoke, temp_dir):
    cli_invoke(
        ["mcmc-opt", "--target", "normal", "--iters", "0", "--output", "n"]
    )
    _, values = read_csv(temp_dir / "n" / "sigma.csv")
    assert np.all(values[:, 2] == 1.0)
    effective = RunConfig.read(temp_dir / "n" / "effective.cfg")
    assert effective.run.experiment == "normal"
    assert effective.train.l1_weight == 1e-4


@pytest.mark.parametrize(
    "more, weight",
    [
        (["--set", "train.l1_weight=0.5"], 0.5),
        (["--config", "mcmc.cfg"], 0.25),
        (["--config", "mcmc.cfg", "--set", "train.l1_weight=0.5"], 0.5),
        (["--set", "train.l1_weight=0.5", "--l1-weight", "0.125"], 0.125),
    ],
)
def test_mcmc_opt_l1_weight_precedence(cli_invoke, temp_dir, more, weight):
    (temp_dir / "mcmc.cfg").write_text("[train]\nl1_weight = 0.25\n")
    cli_invoke(
        ["mcmc-opt", "--target", "normal", "--iters", "0", "--output", "n"]
        + more
    )
    effective = RunConfig.read(temp_dir / "n" / "effective.cfg")
    assert effective.train.l1_weight == weight


@pytest.mark.parametrize("command", ["train", "density", "sample", "mcmc-opt"])
def test_help_lists_configuration(cli_invoke, command):
    result = cli_invoke([command, "--help"])
    assert "--set SECTION.KEY=VALUE" in result.output
    assert "model.dim = 0" in result.output
    assert "train.iterations = 2000" in result.output


@pytest.mark.parametrize("command", ["train", "density", "sample", "mcmc-opt"])
def test_help_configuration_matches_golden(cli_invoke, command):
    result = cli_invoke([command, "--help"])
    header = "Configuration keys, set with --set section.key=value:"
    _, found, listing = result.output.partition(header)
    assert found
    lines = [line.strip() for line in listing.splitlines() if line.strip()]
    expected = (GOLDEN / "config_keys.txt").read_text().splitlines()
    assert lines == expected


def test_help_shows_defaults(cli_invoke):
    result = cli_invoke(["mcmc-opt", "--help"])
    assert "[default: 0.0001]" in result.output
    result = cli_invoke(["sample", "--help"])
    assert "[default: generate]" in result.output


def test_group_help(cli_invoke):
    result = cli_invoke(["--help"])
    assert "Stochastic normalizing flows." in result.output
    for command in ["train", "density", "sample", "mcmc-opt"]:
        assert command in result.output


def test_untrained_flow_is_near_identity(cli_invoke, temp_dir):
    train_small(cli_invoke, "out", "--iters", "0", "--lambda", "0")
    cli_invoke(
        ["density", "--checkpoint", "out/model.ckpt", "--output", "out"]
        + ["--extent", "-2", "2", "-2", "2", "--resolution", "5", "5"]
        + ["--paths", "1"]
    )
    _, values = read_csv(temp_dir / "out" / "density.csv")
    normal = -0.5 * np.sum(values[:, :2] ** 2, axis=1) - math.log(2 * math.pi)
    assert np.max(np.abs(values[:, 2] - normal)) < 0.05

    count = 2000
    cli_invoke(
        ["sample", "--checkpoint", "out/model.ckpt", "--output", "out"]
        + ["--count", str(count)]
    )
    _, samples = read_csv(temp_dir / "out" / "samples.csv")
    se = 1 / math.sqrt(count)
    assert np.all(np.abs(np.mean(samples, axis=0)) < 3 * se + 0.02)
    assert np.all(
        np.abs(np.var(samples, axis=0) - 1) < 3 * math.sqrt(2) * se + 0.02
    )
