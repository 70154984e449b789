import json
import os
import pytest
import torch

from click.testing import CliRunner
from dotenv import load_dotenv

from app import create_cli
from app.constants import EXIT_CONFIG_ERROR, EXIT_LAB_ERROR
from app.core.checkpoints import save_model
from app.core.models import build_model
from app.utils.files import read_csv

load_dotenv()

EXPERIMENT = {
    "name": "cli-audit",
    "dataset": {"synthetic_size": 400, "image_size": 8, "num_classes": 10, "seed": 0},
    "model": {"arch": "toy-cnn", "seed": 2, "dtype": "float64"},
    "round": {"batch_size": 8},
    "evaluation": {"n_batches": 5},
    "threshold": {"n_batches": 300},
}

@pytest.fixture
def runner():
    """Set up a CLI runner for the command group."""
    return CliRunner()

@pytest.fixture
def cli():
    """Build the command group."""
    return create_cli()

@pytest.fixture
def experiment(tmp_path, monkeypatch):
    """Write the audit experiment and point the output root at a temporary directory."""
    monkeypatch.setenv("SEER_OUTPUT_ROOT", str(tmp_path / "runs"))
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(EXPERIMENT))
    return str(path)

def _payload(result):
    return json.loads(result.stdout.strip().splitlines()[-1])

def test_detect_writes_audits(runner, cli, experiment, tmp_path):
    """Test that every audited batch gets a CSV row and a JSON record."""
    out = str(tmp_path / "detect")
    result = runner.invoke(cli, ["detect", "--config", experiment, "--output", out])
    assert result.exit_code == 0, result.output
    assert _payload(result)["n_batches"] == 5
    rows = read_csv(os.path.join(out, "detection.csv"))
    assert len(rows) == 5
    with open(os.path.join(out, "audits.jsonl")) as f:
        records = [json.loads(line) for line in f]
    assert len(records) == 5
    assert {"dsnr", "tsnr", "flagged", "config_hash"} <= set(records[0])

def test_detect_rerun_is_byte_identical(runner, cli, experiment, tmp_path):
    """Test that auditing twice with one config writes the same detection table."""
    tables = []
    for run in ("a", "b"):
        out = str(tmp_path / f"detect-{run}")
        result = runner.invoke(cli, ["detect", "--config", experiment, "--output", out, "--n-batches", "3"])
        assert result.exit_code == 0, result.output
        with open(os.path.join(out, "detection.csv"), "rb") as f:
            tables.append(f.read())
    assert tables[0] == tables[1]
    assert tables[0].startswith(b"# config_hash=")

def test_detect_flags_crafted_models(runner, cli, experiment, tmp_path):
    """Test that disaggregators crafted per batch are all flagged."""
    result = runner.invoke(cli, ["detect", "--config", experiment, "--output", str(tmp_path / "d"),
                                 "--craft-target", "0"])
    assert result.exit_code == 0, result.output
    assert _payload(result)["flagged"] == 5

def test_detect_zero_threshold(runner, cli, experiment, tmp_path):
    """Test that a zero D-SNR threshold flags every batch."""
    result = runner.invoke(cli, ["detect", "--config", experiment, "--output", str(tmp_path / "d"),
                                 "--dsnr-threshold", "0", "--n-batches", "3"])
    assert result.exit_code == 0, result.output
    assert _payload(result)["flagged"] == 3

def test_detect_saved_checkpoint(runner, cli, experiment, tmp_path):
    """Test auditing a checkpoint given with --model."""
    checkpoint = str(tmp_path / "model")
    save_model(build_model("toy-cnn", seed=2, dtype=torch.float64), checkpoint, "abc123")
    result = runner.invoke(cli, ["detect", "--config", experiment, "--output", str(tmp_path / "d"),
                                 "--model", checkpoint, "--n-batches", "2"])
    assert result.exit_code == 0, result.output

def test_detect_missing_checkpoint(runner, cli, experiment, tmp_path):
    """Test that a missing checkpoint exits with the lab error code."""
    result = runner.invoke(cli, ["detect", "--config", experiment, "--model", str(tmp_path / "none"),
                                 "--output", str(tmp_path / "d")])
    assert result.exit_code == EXIT_LAB_ERROR

def test_threshold_writes_tau_and_cdfs(runner, cli, experiment, tmp_path):
    """Test the threshold file and both order-statistic CDFs."""
    out = str(tmp_path / "threshold")
    result = runner.invoke(cli, ["threshold", "--config", experiment, "--output", out, "--clients", "4"])
    assert result.exit_code == 0, result.output
    payload = _payload(result)
    assert 0.0 < payload["p"] <= 1.0
    with open(os.path.join(out, "threshold.json")) as f:
        stored = json.load(f)
    assert stored["tau"] == payload["tau"]
    assert stored["num_clients"] == 4
    assert stored["normalize"] is True
    orders = {row["order"] for row in read_csv(os.path.join(out, "cdf.csv"))}
    assert orders == {"top", "second"}

def test_threshold_event_rates(runner, cli, experiment, tmp_path):
    """Test the optional Monte-Carlo success rates."""
    out = str(tmp_path / "threshold")
    result = runner.invoke(cli, ["threshold", "--config", experiment, "--output", out,
                                 "--measurement", "darkness", "--clients", "2", "--event-rounds", "50"])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "threshold.json")) as f:
        rates = json.load(f)["event_rates"]
    assert 0.0 <= rates["target_client"] <= rates["exactly_one_overall"] <= 1.0

def test_threshold_rejects_unknown_measurement(runner, cli, experiment, tmp_path):
    """Test that click validates the measurement choice."""
    result = runner.invoke(cli, ["threshold", "--config", experiment, "--measurement", "purple",
                                 "--output", str(tmp_path / "t")])
    assert result.exit_code == EXIT_CONFIG_ERROR
