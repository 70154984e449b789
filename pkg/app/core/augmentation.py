import torch
import torchvision.transforms.functional as TF

from dataclasses import dataclass
from enum import Enum

from app import logger
from app.constants import DEFAULT_BATCH_AUGMENT_ITERATIONS
from app.core.gradcore import LabeledBatch
from app.core.property import Extreme, MeasurementKind, PropertySpec, extreme_index, measure_batch, zscore
from app.exceptions.lab_errors import BatchRejectedError, PropertyError

_Z_MARGIN = 0.25
_FLAT_STD = 0.1


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.2
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.05
    flips: bool = True
    rotation: bool = True
    max_angle: float = 5.0

    def to_dict(self) -> dict:
        return dict(vars(self))


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand(1, generator=generator, dtype=torch.float64))


def _coin(generator: torch.Generator) -> bool:
    return bool(torch.rand(1, generator=generator) < 0.5)


def _augment_image(image: torch.Tensor, cfg: AugmentConfig, generator: torch.Generator) -> torch.Tensor:
    if cfg.brightness > 0:
        image = TF.adjust_brightness(image, _uniform(generator, 1 - cfg.brightness, 1 + cfg.brightness))
    if cfg.contrast > 0:
        image = TF.adjust_contrast(image, _uniform(generator, 1 - cfg.contrast, 1 + cfg.contrast))
    if cfg.saturation > 0:
        image = TF.adjust_saturation(image, _uniform(generator, 1 - cfg.saturation, 1 + cfg.saturation))
    if cfg.hue > 0:
        image = TF.adjust_hue(image, _uniform(generator, -cfg.hue, cfg.hue))
    if cfg.flips:
        if _coin(generator):
            image = TF.hflip(image)
        if _coin(generator):
            image = TF.vflip(image)
    if cfg.rotation:
        quarter_turns = int(torch.randint(4, (1,), generator=generator))
        image = torch.rot90(image, quarter_turns, dims=(-2, -1))
        epsilon = _uniform(generator, -cfg.max_angle, cfg.max_angle)
        image = TF.rotate(image, epsilon, interpolation=TF.InterpolationMode.BILINEAR)
    return image


def data_augment(batch: LabeledBatch, seed: int, cfg: AugmentConfig = AugmentConfig()) -> LabeledBatch:
    """Seeded per-image jitter, flips and N*90+eps rotations, clamped to [0, 1]"""
    generator = torch.Generator().manual_seed(int(seed))
    images = torch.stack([_augment_image(img, cfg, generator) for img in batch.images])
    return LabeledBatch(images.clamp(0.0, 1.0), batch.labels)


class TargetCount(str, Enum):
    EXACTLY_ONE = "exactly-one"
    EXACTLY_ZERO = "exactly-zero"


def _shift_direction(spec: PropertySpec) -> float:
    if spec.measurement.kind == MeasurementKind.BRIGHTNESS:
        return 1.0
    if spec.measurement.kind == MeasurementKind.DARKNESS:
        return -1.0
    raise PropertyError(f"Batch augmentation adjusts brightness and cannot steer '{spec.measurement.kind.value}'")


def batch_augment(batch: LabeledBatch, spec: PropertySpec, target: TargetCount,
                  max_iterations: int = DEFAULT_BATCH_AUGMENT_ITERATIONS) -> LabeledBatch:
    """
    Shift per-image brightness until exactly `target` examples pass the normalized threshold

    Raises BatchRejectedError when the iteration cap is reached.
    """
    if spec.tau is None:
        raise PropertyError("Batch augmentation needs a threshold tau")
    target = TargetCount(target)
    direction = _shift_direction(spec)
    sign = 1.0 if spec.extreme == Extreme.MAX else -1.0
    images = batch.images

    for iteration in range(max_iterations):
        values = measure_batch(images, spec.measurement)
        z = zscore(values)
        passing = spec.satisfies(z)
        wanted = torch.zeros_like(passing)
        if target == TargetCount.EXACTLY_ONE:
            wanted[extreme_index(z, spec.extreme)] = True
        if torch.equal(passing, wanted):
            if iteration:
                logger.debug(f"Batch augmentation reached {target.value} after {iteration} iterations")
                return LabeledBatch(images, batch.labels)
            return batch

        std = float(values.std(unbiased=False)) or _FLAT_STD
        goal = torch.full_like(z, spec.tau - sign * _Z_MARGIN)
        goal[wanted] = spec.tau + sign * _Z_MARGIN
        needs_move = passing != wanted
        delta = torch.where(needs_move, (goal - z) * std, torch.zeros_like(z)) * direction
        images = (images + delta.to(images.dtype).reshape(-1, 1, 1, 1)).clamp(0.0, 1.0)

    raise BatchRejectedError(f"Batch augmentation did not reach {target.value} in {max_iterations} iterations",
                             iterations=max_iterations)
