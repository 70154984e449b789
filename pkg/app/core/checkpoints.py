import hashlib
import os
import torch

from typing import Dict, Optional, Tuple

from app import logger
from app.core.gradcore import ModelHandle, SubsampleMask
from app.core.models import build_model
from app.core.property import PropertySpec
from app.core.seer import CURVE_COLUMNS, AttackArtifact, SecretDecoder, TrainConfig
from app.exceptions.lab_errors import ArchitectureMismatchError, ArtifactError
from app.utils.files import read_json, write_csv, write_json

MODEL_FILE = "model.pt"
MANIFEST_FILE = "manifest.json"
DECODER_FILE = "decoder.pt"
ATTACK_FILE = "attack.json"
CURVE_FILE = "loss_curve.csv"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def content_hash(*state_dicts: Dict[str, torch.Tensor]) -> str:
    """SHA-256 over tensor names and raw bytes in name order"""
    digest = hashlib.sha256()
    for state in state_dicts:
        for name in sorted(state):
            digest.update(name.encode("utf-8"))
            digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _dtype_name(dtype: torch.dtype) -> str:
    return str(dtype).replace("torch.", "")


def save_model(model: ModelHandle, directory: str, config_hash: str,
               mask: Optional[SubsampleMask] = None) -> str:
    os.makedirs(directory, exist_ok=True)
    state = model.module.state_dict()
    torch.save(state, os.path.join(directory, MODEL_FILE))
    digest = content_hash(state)
    manifest = {
        "arch_id": model.arch_id,
        "parameter_names": model.parameter_names,
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "dtype": _dtype_name(model.dtype),
        "config_hash": config_hash,
        "content_hash": digest,
    }
    if mask is not None:
        manifest["mask"] = mask.to_manifest()
    write_json(os.path.join(directory, MANIFEST_FILE), manifest)
    return digest


def _read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST_FILE)
    if not os.path.isfile(path):
        raise ArtifactError(f"No checkpoint manifest at '{path}'")
    try:
        return read_json(path)
    except ValueError as e:
        raise ArtifactError(f"Malformed checkpoint manifest '{path}': {str(e)}")


def _load_state(path: str) -> Dict[str, torch.Tensor]:
    if not os.path.isfile(path):
        raise ArtifactError(f"Missing checkpoint file '{path}'")
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ArtifactError(f"Cannot read checkpoint '{path}': {str(e)}")


def load_model(directory: str) -> Tuple[ModelHandle, dict]:
    """Rebuild the registered architecture and load its saved state"""
    manifest = _read_manifest(directory)
    try:
        input_shape = manifest["input_shape"]
        model = build_model(manifest["arch_id"], int(manifest["seed"]), int(manifest["num_classes"]),
                            int(input_shape[-1]), _DTYPES[manifest.get("dtype", "float32")])
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Checkpoint manifest is missing or has a malformed field: {str(e)}")
    if list(model.input_shape) != list(input_shape) or model.parameter_names != manifest.get("parameter_names"):
        raise ArchitectureMismatchError(f"Checkpoint parameters do not match architecture '{model.arch_id}'")
    state = _load_state(os.path.join(directory, MODEL_FILE))
    try:
        model.module.load_state_dict(state)
    except RuntimeError as e:
        raise ArchitectureMismatchError(f"Checkpoint does not fit architecture '{model.arch_id}': {str(e)}")
    logger.info(f"Loaded '{model.arch_id}' checkpoint from {directory}")
    return model, manifest


def save_artifact(artifact: AttackArtifact, directory: str, config_hash: str) -> str:
    """Write the full attack artifact; returns its content hash"""
    model_hash = save_model(artifact.model, directory, config_hash, artifact.mask)
    decoder_state = artifact.decoder.state_dict()
    torch.save(decoder_state, os.path.join(directory, DECODER_FILE))
    write_json(os.path.join(directory, ATTACK_FILE), {
        "decoder": {
            "n_sub": artifact.decoder.n_sub,
            "image_shape": list(artifact.decoder.image_shape),
            "fused": artifact.decoder.fused,
            "hidden_dim": None if artifact.decoder.fused else artifact.decoder.n_d,
        },
        "property": artifact.property_spec.to_dict(),
        "train_config": artifact.train_config.to_dict(),
        "clip_factors": artifact.clip_factors,
        "output_scale": artifact.output_scale,
        "config_hash": config_hash,
        "model_hash": model_hash,
        "content_hash": content_hash(artifact.model.module.state_dict(), decoder_state),
    })
    write_csv(os.path.join(directory, CURVE_FILE), CURVE_COLUMNS, artifact.curve, config_hash)
    return content_hash(artifact.model.module.state_dict(), decoder_state)


def load_artifact(directory: str) -> AttackArtifact:
    model, manifest = load_model(directory)
    attack_path = os.path.join(directory, ATTACK_FILE)
    if not os.path.isfile(attack_path):
        raise ArtifactError(f"'{directory}' holds a model checkpoint but no attack artifact")
    try:
        attack = read_json(attack_path)
        dims = attack["decoder"]
        mask = SubsampleMask.from_manifest(manifest["mask"])
        decoder = SecretDecoder(dims["n_sub"], dims["image_shape"], dims["fused"], dims["hidden_dim"])
        decoder.to(model.dtype)
        decoder.load_state_dict(_load_state(os.path.join(directory, DECODER_FILE)))
        return AttackArtifact(
            model=model,
            decoder=decoder,
            mask=mask,
            property_spec=PropertySpec.from_dict(attack["property"]),
            train_config=TrainConfig.from_dict(attack["train_config"]),
            clip_factors=attack.get("clip_factors"),
            output_scale=float(attack.get("output_scale", 1.0)),
        )
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise ArtifactError(f"Malformed attack artifact in '{directory}': {str(e)}")
