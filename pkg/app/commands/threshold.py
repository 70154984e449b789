import os
import click

from app.commands import echo_result, experiment_options, prepare_datasets
from app.configurations.experiment import load_experiment
from app.core.property import (
    Measurement,
    MeasurementKind,
    PropertySpec,
    SelectionMode,
    estimate_order_stat_cdfs,
    optimize_threshold,
    secagg_event_rates,
)
from app.decorators.timing import timing
from app.utils.files import atomic_directory, write_csv, write_json

THRESHOLD_FILE = "threshold.json"
CDF_FILE = "cdf.csv"
CDF_COLUMNS = ("order", "value", "probability")


@click.command("threshold")
@click.option("--measurement", type=click.Choice([k.value for k in MeasurementKind]), default=None,
              help="Measurement to threshold; defaults to the config property")
@click.option("--batch-size", type=int, default=None)
@click.option("--clients", type=int, default=None)
@click.option("--n-batches", type=int, default=None, help="Sampled batches per CDF estimate")
@click.option("--no-normalize", is_flag=True, help="Use raw instead of in-batch z-scored measurements")
@click.option("--event-rounds", type=int, default=0,
              help="Also estimate the success-event rates over this many simulated rounds")
@experiment_options
@timing("command:threshold")
def threshold_command(measurement, batch_size, clients, n_batches, no_normalize, event_rounds,
                      config_path, overrides, output, overwrite):
    """Choose the secure-aggregation threshold maximizing single-image selection"""
    cfg = load_experiment(config_path, overrides)
    aux, _ = prepare_datasets(cfg)
    section = cfg["threshold"]
    m = Measurement(measurement) if measurement else cfg.property_spec().measurement
    batch_size = batch_size or cfg["round"]["batch_size"]
    clients = clients or cfg["round"]["num_clients"]
    n_batches = n_batches or section["n_batches"]
    normalize = section["normalize"] and not no_normalize

    phi1, phi2 = estimate_order_stat_cdfs(aux, batch_size, m, n_batches, section["seed"], normalize)
    tau, p = optimize_threshold(phi1, phi2, clients)
    result = {
        "tau": tau,
        "p": p,
        "measurement": m.to_dict(),
        "batch_size": batch_size,
        "num_clients": clients,
        "n_batches": n_batches,
        "normalize": normalize,
    }
    if event_rounds:
        spec = PropertySpec(m, SelectionMode.SECAGG_THRESHOLD, tau)
        result["event_rates"] = secagg_event_rates(aux, spec, batch_size, clients, event_rounds, section["seed"])

    rows = [{"order": order, "value": v, "probability": q}
            for order, cdf in (("top", phi1), ("second", phi2))
            for v, q in zip(cdf.values.tolist(), cdf.probabilities.tolist())]
    out = cfg.output_dir("threshold", output)
    with atomic_directory(out, overwrite) as staging:
        write_json(os.path.join(staging, THRESHOLD_FILE), result | {"config_hash": cfg.config_hash})
        write_csv(os.path.join(staging, CDF_FILE), CDF_COLUMNS, rows, cfg.config_hash)

    echo_result({"output": out, "config_hash": cfg.config_hash, "tau": tau, "p": p})
