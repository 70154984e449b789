import torch
import torch.nn as nn

from dataclasses import dataclass, field
from typing import Dict, List, Optional

from app import logger
from app.constants import (
    CRAFTED_LOGIT_SCALE,
    CRAFTED_MIN_FACTOR,
    DEFAULT_DSNR_THRESHOLD,
    DEFAULT_TSNR_THRESHOLD,
    DSNR_DENOMINATOR_EPS,
    INF,
)
from app.core.gradcore import LabeledBatch, LossKind, ModelHandle, per_example_gradients
from app.decorators.timing import timing
from app.exceptions.lab_errors import (
    BatchTooSmallError,
    FixtureError,
    InapplicableError,
    ParameterError,
)
from app.utils.files import json_safe

@dataclass(frozen=True)
class Flag:
    metric: str
    layer: str
    value: float
    threshold: float


@dataclass
class DetectionReport:
    per_layer_dsnr: Dict[str, float]
    dsnr: float
    tsnr: Optional[float] = None
    flags: List[Flag] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    def to_record(self, model_id: str, batch_id: int) -> dict:
        return json_safe({
            "model_id": model_id,
            "batch_id": batch_id,
            "per_layer_dsnr": self.per_layer_dsnr,
            "dsnr": self.dsnr,
            "tsnr": self.tsnr,
            "flags": [vars(f) for f in self.flags],
        })


def dominance_ratio(norms: torch.Tensor) -> float:
    """max / (sum - max) with the +inf sentinel for an empty denominator"""
    top = float(norms.max())
    if top == 0.0:
        return 0.0
    rest = float(norms.sum()) - top
    if rest <= DSNR_DENOMINATOR_EPS * top:
        return INF
    return top / rest


def dsnr(model: ModelHandle, batch: LabeledBatch,
         loss: LossKind = LossKind.CROSS_ENTROPY) -> DetectionReport:
    """Per linear-layer weight: largest per-example gradient norm over the sum of the others"""
    if len(batch) < 2:
        raise BatchTooSmallError(2, len(batch))
    grads = per_example_gradients(model, batch, loss)
    per_layer = {}
    for name in model.linear_layer_names:
        norms = torch.stack([torch.linalg.vector_norm(g[name].detach()) for g in grads])
        per_layer[name] = dominance_ratio(norms)
    return DetectionReport(per_layer, max(per_layer.values()))


def first_parameterized_layer(model: ModelHandle):
    for name, kind in model.layers:
        module = model.module.get_submodule(name) if name else model.module
        if any(True for _ in module.parameters(recurse=False)):
            return name, kind, module
    raise InapplicableError("Model has no parameterized layers")


def tsnr(model: ModelHandle) -> float:
    """Largest |dominant entry| / sum |other entries| over first-layer filters"""
    name, kind, module = first_parameterized_layer(model)
    if kind != "convolutional":
        raise InapplicableError(f"First layer '{name}' is {kind}, not convolutional")
    kernels = module.weight.detach().abs().reshape(module.out_channels, -1)
    return max(dominance_ratio(k) for k in kernels)


@timing("detect.audit")
def audit(model: ModelHandle, batch: LabeledBatch, dsnr_threshold: float = DEFAULT_DSNR_THRESHOLD,
          tsnr_threshold: float = DEFAULT_TSNR_THRESHOLD,
          loss: LossKind = LossKind.CROSS_ENTROPY) -> DetectionReport:
    """D-SNR always, T-SNR when the first layer is a convolution; flags values above threshold"""
    report = dsnr(model, batch, loss)
    for layer, value in report.per_layer_dsnr.items():
        if value > dsnr_threshold:
            report.flags.append(Flag("dsnr", layer, value, dsnr_threshold))

    name, kind, _ = first_parameterized_layer(model)
    if kind == "convolutional":
        report.tsnr = tsnr(model)
        if report.tsnr > tsnr_threshold:
            report.flags.append(Flag("tsnr", f"{name}.weight", report.tsnr, tsnr_threshold))
    if report.flagged:
        logger.warning(f"Model flagged as vulnerable: {[(f.metric, f.layer) for f in report.flags]}")
    return report


def _final_linear(module: nn.Module):
    found = None
    for name, sub in module.named_modules():
        if isinstance(sub, nn.Linear):
            found = (name, sub)
    if found is None:
        raise InapplicableError("Model has no final dense layer")
    return found


def craft_disaggregator(model: ModelHandle, target_index: int, batch: LabeledBatch) -> ModelHandle:
    """
    Copy of `model` whose final dense layer isolates one example on this batch

    The final layer is re-solved by least squares so every other example is
    classified with a large logit margin (near-zero loss and gradient) while the
    target is pushed towards a wrong class.
    """
    if not 0 <= target_index < len(batch):
        raise ParameterError(f"target_index {target_index} out of range for batch of size {len(batch)}")
    crafted = model.copy()
    layer_name, layer = _final_linear(crafted.module)

    captured = {}
    hook = layer.register_forward_hook(lambda _m, inputs, _o: captured.update(features=inputs[0]))
    try:
        with torch.no_grad():
            crafted.forward(batch.images)
    finally:
        hook.remove()

    features = captured["features"].detach().cpu().to(torch.float64)
    has_bias = layer.bias is not None
    design = features
    if has_bias:
        design = torch.cat([features, torch.ones(len(batch), 1, dtype=torch.float64)], dim=1)
    classes = layer.out_features
    labels = batch.labels.cpu().long().clone()
    labels[target_index] = (labels[target_index] + 1) % classes
    targets = CRAFTED_LOGIT_SCALE * torch.nn.functional.one_hot(labels, classes).to(torch.float64)
    solution = torch.linalg.pinv(design) @ targets

    with torch.no_grad():
        layer.weight.copy_(solution[:layer.in_features].T.to(layer.weight))
        if has_bias:
            layer.bias.copy_(solution[-1].to(layer.bias))

    weight_name = f"{layer_name}.weight" if layer_name else "weight"
    achieved = dsnr(crafted, batch).per_layer_dsnr[weight_name]
    if achieved < CRAFTED_MIN_FACTOR:
        raise FixtureError(achieved, CRAFTED_MIN_FACTOR)
    logger.info(f"Crafted disaggregator for example {target_index} reaches D-SNR {achieved:.4g}")
    return crafted
