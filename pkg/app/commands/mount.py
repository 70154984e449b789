import os
import click

from app import logger
from app.commands import check_input_shape, echo_result, experiment_options, on_device, prepare_datasets
from app.configurations.experiment import ExperimentConfig, load_experiment
from app.core.checkpoints import load_artifact
from app.core.datasets import ImageDataset
from app.core.evalkit import REPORT_COLUMNS, DetectionSpec, evaluate_attack
from app.core.fedsim import aggregate_round, dirichlet_partition, run_honest_rounds, sample_client_batches, uniform_partition
from app.core.seer import AttackArtifact, calibrate_output_range, estimate_clip_factors, mount
from app.decorators.timing import timing
from app.utils.files import atomic_directory, save_png, write_csv, write_json

REPORT_FILE = "report.csv"
SUMMARY_FILE = "summary.json"
ROUND_SEED_STRIDE = 100_003


def _partition(cfg: ExperimentConfig, dataset: ImageDataset):
    section = cfg["round"]
    if section["dirichlet_alpha"] is not None:
        return dirichlet_partition(dataset.labels_list(), section["num_clients"],
                                   section["dirichlet_alpha"], section["seed"])
    return uniform_partition(len(dataset), section["num_clients"], section["seed"])


def _rounds(dataset: ImageDataset, partition, batch_size: int, seed: int, n_rounds: int):
    return [sample_client_batches(dataset, partition, batch_size, seed * ROUND_SEED_STRIDE + k)
            for k in range(n_rounds)]


def _calibrate(artifact: AttackArtifact, cfg: ExperimentConfig, aux: ImageDataset, dp) -> float:
    """Output scale chosen on reconstructions of the server's own auxiliary data"""
    evaluation, round_cfg = cfg["evaluation"], cfg.round_config()
    partition = _partition(cfg, aux)
    rounds = _rounds(aux, partition, round_cfg.batch_size, evaluation["seed"] + 1,
                     evaluation["calibration_batches"])
    reconstructions = [mount(artifact, aggregate_round(artifact.model, batches, artifact.train_config.loss, dp,
                                                       round_index=ROUND_SEED_STRIDE + k),
                             output_scale=1.0)
                       for k, batches in enumerate(rounds)]
    return calibrate_output_range(reconstructions, evaluation["calibration_coverage"])


@click.command("mount")
@click.argument("artifact_path", type=click.Path())
@experiment_options
@timing("command:mount")
def mount_command(artifact_path, config_path, overrides, output, overwrite):
    """Mount a trained attack on simulated rounds and score the reconstructions"""
    cfg = load_experiment(config_path, overrides)
    artifact = load_artifact(artifact_path)
    on_device(artifact.model)
    artifact.decoder.to(artifact.model.device)
    aux, heldout = prepare_datasets(cfg)
    check_input_shape(artifact.model, heldout)

    round_cfg, dp = cfg.round_config(), cfg.dp_config()
    evaluation = cfg["evaluation"]
    partition = _partition(cfg, heldout)

    if dp is not None and cfg["dp"]["estimate_clip_factors"]:
        artifact.clip_factors = estimate_clip_factors(artifact.model, aux, round_cfg.batch_size, dp,
                                                      cfg["dp"]["clip_batches"], dp.seed,
                                                      artifact.train_config.loss)
    if evaluation["calibrate"]:
        artifact.output_scale = _calibrate(artifact, cfg, aux, dp)
        logger.info(f"Calibrated output scale {artifact.output_scale:.4g}")

    model = artifact.model
    if cfg["round"]["honest_rounds"]:
        model = run_honest_rounds(artifact.model.copy(), heldout, partition, round_cfg,
                                  cfg["round"]["honest_rounds"], cfg["round"]["honest_learning_rate"],
                                  artifact.train_config.loss)

    detection = None
    if evaluation["detect"]:
        if round_cfg.batch_size < 2:
            logger.warning("Detection needs at least two examples per batch; skipping audits")
        else:
            detection = DetectionSpec(evaluation["dsnr_threshold"], evaluation["tsnr_threshold"])

    rounds = _rounds(heldout, partition, round_cfg.batch_size, evaluation["seed"], evaluation["n_batches"])
    report = evaluate_attack(artifact, model, rounds, detection, dp, evaluation["psnr_threshold"])

    out = cfg.output_dir("mount", output)
    with atomic_directory(out, overwrite) as staging:
        for batch_id, image in enumerate(report.reconstructions):
            save_png(os.path.join(staging, f"reconstruction_{batch_id:04d}.png"), image, cfg.config_hash)
        write_csv(os.path.join(staging, REPORT_FILE), REPORT_COLUMNS,
                  [record.row() for record in report.records], cfg.config_hash)
        write_json(os.path.join(staging, SUMMARY_FILE), report.summary() | {"config_hash": cfg.config_hash})

    echo_result({"output": out, "config_hash": cfg.config_hash} | report.summary())
