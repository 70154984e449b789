import os
import click

from app import logger
from app.commands import echo_result, experiment_options, prepare_datasets, prepare_model
from app.configurations.experiment import load_experiment
from app.core import seer
from app.core.checkpoints import save_artifact
from app.decorators.timing import timing
from app.exceptions.lab_errors import DivergenceError
from app.utils.files import atomic_directory, write_json

CONFIG_FILE = "config.json"


@click.command("train")
@experiment_options
@timing("command:train")
def train_command(config_path, overrides, output, overwrite):
    """Train the released model jointly with the secret decoder"""
    cfg = load_experiment(config_path, overrides)
    aux, _ = prepare_datasets(cfg)
    model = prepare_model(cfg, aux)
    train_cfg = cfg.train_config()
    out = cfg.output_dir("train", output)

    with atomic_directory(out, overwrite) as staging:
        try:
            artifact = seer.train(model, aux, train_cfg)
        except DivergenceError as e:
            diagnostic = f"{out}.diverged"
            if e.artifact is not None:
                save_artifact(e.artifact, diagnostic, cfg.config_hash)
                logger.critical(f"Diagnostic checkpoint written to {diagnostic}")
            raise
        digest = save_artifact(artifact, staging, cfg.config_hash)
        write_json(os.path.join(staging, CONFIG_FILE), cfg.data)

    echo_result({
        "artifact": out,
        "config_hash": cfg.config_hash,
        "content_hash": digest,
        "steps": len(artifact.curve),
    })
