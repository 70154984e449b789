import json
import click
import torch

from functools import wraps
from typing import Callable, Tuple

from app import logger
from app.configurations import config
from app.configurations.experiment import ExperimentConfig
from app.core.checkpoints import load_model
from app.core.datasets import ImageDataset, load_dataset, split_dataset
from app.core.gradcore import ModelHandle
from app.core.models import build_model
from app.exceptions.lab_errors import ArchitectureMismatchError
from app.utils.files import json_safe

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def experiment_options(func: Callable) -> Callable:
    """--config, --set, --output and --overwrite shared by every subcommand"""
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="Experiment JSON file")
    @click.option("--set", "overrides", multiple=True, metavar="SECTION.FIELD=VALUE",
                  help="Override a config field; repeatable")
    @click.option("--output", default=None, help="Output directory")
    @click.option("--overwrite", is_flag=True, help="Replace an existing output directory")
    @wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)
    return wrapper


def prepare_datasets(cfg: ExperimentConfig) -> Tuple[ImageDataset, ImageDataset]:
    """(auxiliary, held-out) split of the configured dataset"""
    section = cfg["dataset"]
    dataset = load_dataset(section["source"], section["synthetic_size"], section["image_size"],
                           section["num_classes"], section["seed"])
    return split_dataset(dataset, section["holdout_fraction"], section["seed"])


def prepare_model(cfg: ExperimentConfig, dataset: ImageDataset) -> ModelHandle:
    """Configured checkpoint if given, else a seeded fresh model sized for the dataset"""
    section = cfg["model"]
    if section["checkpoint"]:
        model, _ = load_model(section["checkpoint"])
        if model.arch_id != section["arch"]:
            raise ArchitectureMismatchError(
                f"Checkpoint holds '{model.arch_id}', config asks for '{section['arch']}'"
            )
    else:
        model = build_model(section["arch"], section["seed"], dataset.num_classes,
                            dataset.image_shape[-1], _DTYPES[section["dtype"]])
    check_input_shape(model, dataset)
    return on_device(model)


def on_device(model: ModelHandle) -> ModelHandle:
    """Move a model to the device named by SEER_DEVICE"""
    return model.to(torch.device(config.get_device()))


def check_input_shape(model: ModelHandle, dataset: ImageDataset) -> None:
    if tuple(dataset.image_shape) != tuple(model.input_shape):
        raise ArchitectureMismatchError(
            f"Model expects inputs of shape {model.input_shape}, dataset has {dataset.image_shape}"
        )


def echo_result(payload: dict) -> None:
    logger.info(f"Result: {payload}")
    click.echo(json.dumps(json_safe(payload), sort_keys=True))
