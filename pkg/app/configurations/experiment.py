import copy
import hashlib
import json
import os

from typing import Any, Dict, Iterable, Optional

from app.configurations import config
from app.constants import (
    DEFAULT_CALIBRATION_COVERAGE,
    DEFAULT_CDF_BATCHES,
    DEFAULT_CLIP_BATCHES,
    DEFAULT_DSNR_THRESHOLD,
    DEFAULT_TSNR_THRESHOLD,
    PSNR_REC_THRESHOLD,
)
from app.core.augmentation import AugmentConfig
from app.core.fedsim import Aggregation, DPConfig, RoundConfig
from app.core.models import ARCHITECTURES
from app.core.property import PropertySpec
from app.core.seer import TrainConfig
from app.exceptions.config_errors import InvalidConfigField
from app.exceptions.lab_errors import LabError
from app.utils.validators import (
    validate_fraction,
    validate_nonnegative_int,
    validate_positive,
    validate_positive_int,
)

HASH_LENGTH = 12

DEFAULTS: Dict[str, Any] = {
    "name": "experiment",
    "output_dir": None,
    "dataset": {
        "source": None,
        "synthetic_size": 2000,
        "image_size": 8,
        "num_classes": 10,
        "seed": 0,
        "holdout_fraction": 0.2,
    },
    "model": {"arch": "toy-cnn", "seed": 0, "dtype": "float32", "checkpoint": None},
    "round": {
        "batch_size": 16,
        "num_clients": 1,
        "aggregation": None,
        "seed": 0,
        "dirichlet_alpha": None,
        "honest_rounds": 0,
        "honest_learning_rate": 0.01,
    },
    "dp": None,
    "property": {"measurement": {"kind": "brightness"}, "mode": "local-extreme", "tau": None, "extreme": "max"},
    "train": {
        "epochs": 1,
        "steps_per_epoch": 100,
        "learning_rate": 1e-4,
        "accumulation": 10,
        "beta0": -2.0,
        "beta1": None,
        "seed": 0,
        "subsample_fraction": 0.001,
        "subsample_min": 8400,
        "fused": True,
        "hidden_dim": None,
        "rec_loss": "l2",
        "surrogate_nul": True,
        "augment": None,
        "batch_augment": True,
        "batch_augment_iterations": 50,
    },
    "evaluation": {
        "n_batches": 100,
        "seed": 1,
        "psnr_threshold": PSNR_REC_THRESHOLD,
        "detect": True,
        "dsnr_threshold": DEFAULT_DSNR_THRESHOLD,
        "tsnr_threshold": DEFAULT_TSNR_THRESHOLD,
        "calibrate": False,
        "calibration_coverage": DEFAULT_CALIBRATION_COVERAGE,
        "calibration_batches": 20,
    },
    "threshold": {"n_batches": DEFAULT_CDF_BATCHES, "normalize": True, "seed": 0},
}

DP_DEFAULTS = {"clip_norm": 1.0, "noise_multiplier": 0.0, "seed": 0,
               "estimate_clip_factors": True, "clip_batches": DEFAULT_CLIP_BATCHES}

# sections whose content is passed through as-is
_OPEN_SECTIONS = {"property", "train.augment"}


def _merge(defaults: Dict, values: Dict, prefix: str = "") -> Dict:
    merged = copy.deepcopy(defaults)
    for key, value in values.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise InvalidConfigField(path, f"Unknown config field '{path}'")
        default = defaults[key]
        if path in _OPEN_SECTIONS or (path == "dp" and value is None):
            merged[key] = copy.deepcopy(value)
        elif path == "dp":
            if not isinstance(value, dict):
                raise InvalidConfigField(path, "Config field 'dp' must be an object or null")
            merged[key] = _merge(DP_DEFAULTS, value, "dp.")
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise InvalidConfigField(path, f"Config field '{path}' must be an object")
            merged[key] = _merge(default, value, f"{path}.")
        else:
            merged[key] = value
    return merged


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(data: Dict, overrides: Iterable[str]) -> Dict:
    """Apply `dotted.path=value` assignments; values are parsed as JSON when possible"""
    result = copy.deepcopy(data)
    for override in overrides:
        if "=" not in override:
            raise InvalidConfigField(override, f"Override '{override}' must look like 'section.field=value'")
        path, text = override.split("=", 1)
        keys = path.strip().split(".")
        node = result
        for key in keys[:-1]:
            if node.get(key) is None:
                node[key] = {}
            node = node[key]
            if not isinstance(node, dict):
                raise InvalidConfigField(path, f"Config field '{key}' is not an object")
        node[keys[-1]] = _parse_override_value(text)
    return result


class ExperimentConfig:
    """A validated experiment document plus builders for the domain configs"""

    def __init__(self, data: Dict):
        self.data = _merge(DEFAULTS, data)
        self._validate()

    def __getitem__(self, section: str):
        return self.data[section]

    @property
    def name(self) -> str:
        return str(self.data["name"])

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]

    def round_config(self) -> RoundConfig:
        r = self.data["round"]
        aggregation = r["aggregation"] or (
            Aggregation.SINGLE_CLIENT if r["num_clients"] == 1 else Aggregation.SECURE_SUM_MEAN
        )
        return RoundConfig(r["batch_size"], r["num_clients"], aggregation, r["seed"])

    def dp_config(self) -> Optional[DPConfig]:
        dp = self.data["dp"]
        if dp is None:
            return None
        return DPConfig(dp["clip_norm"], dp["noise_multiplier"], dp["seed"])

    def property_spec(self) -> PropertySpec:
        return PropertySpec.from_dict(self.data["property"])

    def train_config(self) -> TrainConfig:
        values = dict(self.data["train"])
        if values["augment"] is not None:
            values["augment"] = AugmentConfig(**values["augment"])
        return TrainConfig(property_spec=self.property_spec(),
                           batch_size=self.data["round"]["batch_size"],
                           num_clients=self.data["round"]["num_clients"], **values)

    def output_dir(self, command: str, override: Optional[str] = None) -> str:
        if override:
            return override
        if self.data["output_dir"]:
            return os.path.join(self.data["output_dir"], command)
        return os.path.join(config.get_output_root(), self.name, command)

    def _check(self, field: str, builder) -> None:
        try:
            builder()
        except InvalidConfigField:
            raise
        except (LabError, KeyError, TypeError, ValueError) as e:
            message = e.message if isinstance(e, LabError) else str(e)
            raise InvalidConfigField(field, f"Invalid config field '{field}': {message}")

    def _validate(self) -> None:
        dataset = self.data["dataset"]
        source = dataset["source"]
        if source is not None and not os.path.exists(source):
            raise InvalidConfigField("dataset.source", f"Dataset path '{source}' does not exist")
        self._check("dataset", lambda: (
            validate_positive_int(dataset["image_size"], "image_size"),
            validate_positive_int(dataset["num_classes"], "num_classes"),
            validate_fraction(dataset["holdout_fraction"], "holdout_fraction", upper=0.99),
            source is not None or validate_positive_int(dataset["synthetic_size"], "synthetic_size"),
        ))
        if self.data["model"]["arch"] not in ARCHITECTURES:
            raise InvalidConfigField("model.arch", f"Unknown architecture '{self.data['model']['arch']}'")
        if self.data["model"]["dtype"] not in ("float32", "float64"):
            raise InvalidConfigField("model.dtype", "model.dtype must be 'float32' or 'float64'")
        self._check("round", self.round_config)
        self._check("round", lambda: (
            validate_nonnegative_int(self.data["round"]["honest_rounds"], "honest_rounds"),
            validate_positive(self.data["round"]["honest_learning_rate"], "honest_learning_rate"),
            self.data["round"]["dirichlet_alpha"] is None
            or validate_positive(self.data["round"]["dirichlet_alpha"], "dirichlet_alpha"),
        ))
        self._check("dp", self.dp_config)
        self._check("property", self.property_spec)
        self._check("train", self.train_config)
        evaluation = self.data["evaluation"]
        self._check("evaluation", lambda: (
            validate_positive_int(evaluation["n_batches"], "n_batches"),
            validate_fraction(evaluation["calibration_coverage"], "calibration_coverage"),
            validate_positive_int(evaluation["calibration_batches"], "calibration_batches"),
        ))
        self._check("threshold", lambda: validate_positive_int(self.data["threshold"]["n_batches"], "n_batches"))


def load_experiment(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read a JSON experiment file (or start from defaults) and apply overrides"""
    data: Dict[str, Any] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise InvalidConfigField("config", f"Config file '{path}' does not exist")
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except ValueError as e:
            raise InvalidConfigField("config", f"Config file '{path}' is not valid JSON: {str(e)}")
        if not isinstance(data, dict):
            raise InvalidConfigField("config", "Config file must hold a JSON object")
    return ExperimentConfig(apply_overrides(data, overrides))
