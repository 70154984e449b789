import json
import os
import pytest

from unittest.mock import patch

from app.configurations.experiment import ExperimentConfig, apply_overrides, load_experiment
from app.core.fedsim import Aggregation
from app.core.property import SelectionMode
from app.exceptions.config_errors import InvalidConfigField

@pytest.fixture
def config_file(tmp_path):
    """Fixture providing a small experiment file on disk."""
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({
        "name": "toy",
        "round": {"batch_size": 8, "num_clients": 2},
        "property": {"measurement": {"kind": "brightness"}, "mode": "secagg-threshold", "tau": 1.5},
    }))
    return str(path)

def test_defaults_build_every_domain_config():
    """Test that an empty document is a valid experiment."""
    experiment = ExperimentConfig({})
    assert experiment.round_config().aggregation == Aggregation.SINGLE_CLIENT
    assert experiment.dp_config() is None
    assert experiment.property_spec().mode == SelectionMode.LOCAL_EXTREME
    assert experiment.train_config().batch_size == 16

def test_config_hash_is_stable_and_sensitive():
    """Test that the hash depends on content, not on key order."""
    a = ExperimentConfig({"name": "x", "train": {"epochs": 2, "seed": 1}})
    b = ExperimentConfig({"train": {"seed": 1, "epochs": 2}, "name": "x"})
    c = ExperimentConfig({"name": "x", "train": {"epochs": 3, "seed": 1}})
    assert a.config_hash == b.config_hash
    assert a.config_hash != c.config_hash
    assert len(a.config_hash) == 12

def test_unknown_field_is_rejected():
    """Test that typos in field names are config errors."""
    with pytest.raises(InvalidConfigField) as exc_info:
        ExperimentConfig({"train": {"epoch": 2}})
    assert exc_info.value.field == "train.epoch"
    assert exc_info.value.exit_code == 2

def test_invalid_values_are_rejected():
    """Test that domain validation failures surface as config errors."""
    with pytest.raises(InvalidConfigField):
        ExperimentConfig({"train": {"learning_rate": -1}})
    with pytest.raises(InvalidConfigField):
        ExperimentConfig({"model": {"arch": "resnet-9000"}})
    with pytest.raises(InvalidConfigField):
        ExperimentConfig({"property": {"measurement": {"kind": "brightness"}, "mode": "global-threshold"}})
    with pytest.raises(InvalidConfigField):
        ExperimentConfig({"dataset": {"source": "/no/such/dataset.npz"}})
    with pytest.raises(InvalidConfigField):
        ExperimentConfig({"round": "big"})

def test_multi_client_defaults_to_secure_mean(config_file):
    """Test the aggregation default for several clients."""
    experiment = load_experiment(config_file)
    assert experiment.round_config().aggregation == Aggregation.SECURE_SUM_MEAN
    assert experiment.train_config().num_clients == 2

def test_dp_section_merges_defaults():
    """Test that a partial DP section is completed from defaults."""
    experiment = ExperimentConfig({"dp": {"clip_norm": 2.0}})
    dp = experiment.dp_config()
    assert dp.clip_norm == 2.0
    assert dp.noise_multiplier == 0.0
    assert experiment["dp"]["estimate_clip_factors"] is True

def test_overrides_parse_json_values():
    """Test dotted overrides with JSON and plain string values."""
    data = apply_overrides({}, ["train.epochs=3", "name=run-a", "dp.clip_norm=0.5", "train.fused=false"])
    assert data == {"train": {"epochs": 3, "fused": False}, "name": "run-a", "dp": {"clip_norm": 0.5}}

def test_override_must_assign():
    """Test that an override without '=' is rejected."""
    with pytest.raises(InvalidConfigField):
        apply_overrides({}, ["train.epochs"])

def test_load_experiment_with_overrides(config_file):
    """Test that overrides win over the file."""
    experiment = load_experiment(config_file, ["round.batch_size=4", "property.tau=1.2"])
    assert experiment["round"]["batch_size"] == 4
    assert experiment.property_spec().tau == 1.2

def test_load_experiment_file_errors(tmp_path):
    """Test missing, malformed and non-object config files."""
    with pytest.raises(InvalidConfigField):
        load_experiment(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(InvalidConfigField):
        load_experiment(str(broken))
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(InvalidConfigField):
        load_experiment(str(listing))

def test_output_dir_resolution(tmp_path):
    """Test explicit, configured and environment output locations."""
    experiment = ExperimentConfig({"name": "toy"})
    assert experiment.output_dir("train", "/explicit") == "/explicit"
    with patch.dict(os.environ, {"SEER_OUTPUT_ROOT": str(tmp_path)}):
        assert experiment.output_dir("train") == os.path.join(str(tmp_path), "toy", "train")
    configured = ExperimentConfig({"output_dir": "/data/out"})
    assert configured.output_dir("mount") == os.path.join("/data/out", "mount")
