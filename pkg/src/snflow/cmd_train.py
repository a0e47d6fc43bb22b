"""Training models."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click

from .config import RunConfig
from .dynamics import SdeModel
from .exceptions import TrainingAborted
from .experiment import Experiment, configure
from .util import run_config_options, snflow_command

logger = logging.getLogger(__name__)


def write_summary(
    file_path: Path, experiment: Experiment, history: List[Dict[str, Any]]
) -> None:
    """Write summary.json: the final loss, iteration count and seed."""
    final_loss: Optional[float] = history[-1]["loss"] if history else None
    summary = {
        "final_loss": final_loss,
        "iters": len(history),
        "seed": experiment.config.run.seed,
    }
    file_path.write_text(json.dumps(summary, sort_keys=True) + "\n")


def run_training(experiment: Experiment) -> Tuple[SdeModel, Path]:
    """
    Train the experiment's model, writing model.ckpt, metrics.jsonl (one
    line per iteration), summary.json and effective.cfg.

    Returns the trained model and the output directory.
    """
    out = experiment.output_dir()
    experiment.config.write(out / "effective.cfg")
    checkpoint = out / "model.ckpt"

    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:

        def record(values: Dict[str, Any]) -> None:
            metrics.write(json.dumps(values, sort_keys=True) + "\n")

        try:
            model, history = experiment.train(on_iteration=record)
        except TrainingAborted as exc:
            logger.warning(f"Saving the last good model to {checkpoint}")
            experiment.save_model(exc.model, checkpoint)
            write_summary(out / "summary.json", experiment, exc.history)
            raise

    experiment.save_model(model, checkpoint)
    write_summary(out / "summary.json", experiment, history)
    if history:
        logger.info(f"Final loss {history[-1]['loss']:.6g}")
    return model, out


@click.command(epilog=RunConfig.describe())
@run_config_options
@snflow_command
def train(config_file: Optional[str], settings: List[str], **flags) -> None:
    """
    Train a stochastic flow.

    Writes model.ckpt, metrics.jsonl (one line per iteration), summary.json
    and the effective configuration into the output directory.
    """
    run_training(configure(config_file, settings, flags))
