import os
import numpy as np
import torch
import torch.nn.functional as F

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple
from PIL import Image

from app import logger
from app.core.gradcore import LabeledBatch
from app.exceptions.lab_errors import DatasetError
from app.utils.validators import validate_fraction, validate_positive_int

_PNG_SUFFIXES = {".png"}


@dataclass(frozen=True)
class ImageDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def batch(self, indices: Sequence[int]) -> LabeledBatch:
        index = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return LabeledBatch(self.images[index], self.labels[index])

    def subset(self, indices: Sequence[int]) -> "ImageDataset":
        index = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return ImageDataset(self.images[index], self.labels[index], self.num_classes)

    def labels_list(self):
        return self.labels.tolist()


def generate_synthetic(n: int, image_size: int = 8, num_classes: int = 10, seed: int = 0,
                       brightness_range: Tuple[float, float] = (0.15, 0.85),
                       tint_strength: float = 0.15, texture_strength: float = 0.2,
                       class_strength: float = 0.1) -> ImageDataset:
    """
    Procedural images with controllable brightness and color statistics

    Each image is a uniform base brightness plus a per-image color tint, a smooth
    random texture and a fixed per-class pattern, clamped to [0, 1].
    """
    n = validate_positive_int(n, "n")
    generator = torch.Generator().manual_seed(int(seed))
    low, high = brightness_range
    labels = torch.randint(num_classes, (n,), generator=generator)
    base = low + (high - low) * torch.rand(n, 1, 1, 1, generator=generator)
    tint = tint_strength * (2 * torch.rand(n, 3, 1, 1, generator=generator) - 1)
    coarse = torch.rand(n, 3, 3, 3, generator=generator) * 2 - 1
    texture = texture_strength * F.interpolate(coarse, size=(image_size, image_size),
                                               mode="bilinear", align_corners=True)
    patterns = class_strength * (2 * torch.rand(num_classes, 3, image_size, image_size,
                                                generator=generator) - 1)
    images = (base + tint + texture + patterns[labels]).clamp(0.0, 1.0)
    return ImageDataset(images, labels, num_classes)


def load_npz(path: str) -> ImageDataset:
    """Load `images` (NHWC uint8 or NCHW float) and `labels` arrays"""
    try:
        archive = np.load(path)
        images, labels = archive["images"], archive["labels"]
    except (OSError, KeyError, ValueError) as e:
        raise DatasetError(f"Cannot read dataset archive '{path}': {str(e)}")
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    tensor = torch.as_tensor(images, dtype=torch.float32)
    if tensor.ndim == 4 and tensor.shape[-1] == 3 and tensor.shape[1] != 3:
        tensor = tensor.permute(0, 3, 1, 2).contiguous()
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_classes = int(labels.max()) + 1 if labels.numel() else 0
    return ImageDataset(tensor, labels, num_classes)


def load_png_directory(path: str) -> ImageDataset:
    """Load a directory holding one sub-directory of PNG images per class"""
    root = Path(path)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, class_name in enumerate(classes):
        for file in sorted((root / class_name).iterdir()):
            if file.suffix.lower() not in _PNG_SUFFIXES:
                continue
            with Image.open(file) as img:
                array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            images.append(torch.as_tensor(array).permute(2, 0, 1))
            labels.append(label)
    if not images:
        raise DatasetError(f"No PNG images found under '{path}'")
    return ImageDataset(torch.stack(images), torch.as_tensor(labels), len(classes))


def load_dataset(source: Optional[str], synthetic_size: int = 0, image_size: int = 8,
                 num_classes: int = 10, seed: int = 0) -> ImageDataset:
    """Load a dataset from a path, or generate one when no path is given"""
    if source is None:
        dataset = generate_synthetic(synthetic_size, image_size, num_classes, seed)
    elif not os.path.exists(source):
        raise DatasetError(f"Dataset path '{source}' does not exist")
    elif os.path.isdir(source):
        dataset = load_png_directory(source)
    else:
        dataset = load_npz(source)
    if len(dataset) == 0:
        raise DatasetError("Dataset is empty")
    logger.info(f"Loaded dataset with {len(dataset)} images of shape {dataset.image_shape}")
    return dataset


def split_dataset(dataset: ImageDataset, holdout_fraction: float,
                  seed: int) -> Tuple[ImageDataset, ImageDataset]:
    """Seeded (auxiliary, held-out) split"""
    holdout_fraction = validate_fraction(holdout_fraction, "holdout_fraction")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_holdout = max(1, int(round(holdout_fraction * len(dataset))))
    if n_holdout >= len(dataset):
        raise DatasetError("Held-out split leaves no auxiliary data")
    return dataset.subset(np.sort(order[n_holdout:])), dataset.subset(np.sort(order[:n_holdout]))
