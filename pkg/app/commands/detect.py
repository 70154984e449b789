import json
import os
import click
import numpy as np

from app.commands import check_input_shape, echo_result, experiment_options, on_device, prepare_datasets, prepare_model
from app.configurations.experiment import load_experiment
from app.core.checkpoints import load_model
from app.core.detect import audit, craft_disaggregator
from app.decorators.timing import timing
from app.utils.files import atomic_directory, write_csv

DETECTION_FILE = "detection.csv"
AUDIT_FILE = "audits.jsonl"
DETECTION_COLUMNS = ("batch_id", "dsnr", "tsnr", "flagged", "flags")


@click.command("detect")
@click.option("--model", "model_path", type=click.Path(), default=None,
              help="Checkpoint directory; defaults to a fresh model built from the config")
@click.option("--n-batches", type=int, default=None, help="Number of audited batches")
@click.option("--dsnr-threshold", type=float, default=None)
@click.option("--tsnr-threshold", type=float, default=None)
@click.option("--craft-target", type=int, default=None,
              help="Audit a disaggregator crafted on each batch to isolate this example")
@click.option("--identical", is_flag=True, help="Fill every batch with one repeated example")
@experiment_options
@timing("command:detect")
def detect_command(model_path, n_batches, dsnr_threshold, tsnr_threshold, craft_target, identical,
                   config_path, overrides, output, overwrite):
    """Audit sampled batches with D-SNR and T-SNR"""
    cfg = load_experiment(config_path, overrides)
    _, heldout = prepare_datasets(cfg)
    if model_path is not None:
        model, _ = load_model(model_path)
        check_input_shape(model, heldout)
        on_device(model)
    else:
        model = prepare_model(cfg, heldout)

    evaluation = cfg["evaluation"]
    n_batches = n_batches or evaluation["n_batches"]
    dsnr_threshold = evaluation["dsnr_threshold"] if dsnr_threshold is None else dsnr_threshold
    tsnr_threshold = evaluation["tsnr_threshold"] if tsnr_threshold is None else tsnr_threshold
    batch_size = cfg.round_config().batch_size
    rng = np.random.default_rng(evaluation["seed"])

    rows, records = [], []
    for batch_id in range(n_batches):
        if identical:
            indices = np.full(batch_size, rng.integers(len(heldout)))
        else:
            indices = rng.choice(len(heldout), size=batch_size, replace=len(heldout) < batch_size)
        batch = heldout.batch(indices)
        audited = model if craft_target is None else craft_disaggregator(model, craft_target, batch)
        report = audit(audited, batch, dsnr_threshold, tsnr_threshold)
        rows.append({
            "batch_id": batch_id,
            "dsnr": report.dsnr,
            "tsnr": "" if report.tsnr is None else report.tsnr,
            "flagged": report.flagged,
            "flags": ";".join(f"{f.metric}:{f.layer}" for f in report.flags),
        })
        records.append(report.to_record(model.arch_id, batch_id))

    out = cfg.output_dir("detect", output)
    with atomic_directory(out, overwrite) as staging:
        write_csv(os.path.join(staging, DETECTION_FILE), DETECTION_COLUMNS, rows, cfg.config_hash)
        with open(os.path.join(staging, AUDIT_FILE), "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record | {"config_hash": cfg.config_hash}, sort_keys=True) + "\n")

    echo_result({
        "output": out,
        "config_hash": cfg.config_hash,
        "n_batches": n_batches,
        "flagged": sum(1 for row in rows if row["flagged"]),
    })
