import torch
import torch.nn as nn

from collections import OrderedDict
from typing import Callable, Dict

from app.core.gradcore import ModelHandle
from app.exceptions.lab_errors import ArchitectureMismatchError

def _toy_cnn(num_classes: int, image_size: int) -> nn.Module:
    pooled = image_size // 2
    return nn.Sequential(OrderedDict([
        ("conv1", nn.Conv2d(3, 8, kernel_size=3, padding=1)),
        ("bn1", nn.BatchNorm2d(8)),
        ("relu1", nn.ReLU()),
        ("conv2", nn.Conv2d(8, 16, kernel_size=3, padding=1)),
        ("bn2", nn.BatchNorm2d(16)),
        ("relu2", nn.ReLU()),
        ("pool", nn.AvgPool2d(2)),
        ("flatten", nn.Flatten()),
        ("fc", nn.Linear(16 * pooled * pooled, num_classes)),
    ]))

def _tiny_cnn(num_classes: int, image_size: int) -> nn.Module:
    # Tanh keeps the loss smooth for finite-difference checks
    side = image_size - 2
    return nn.Sequential(OrderedDict([
        ("conv1", nn.Conv2d(3, 2, kernel_size=3)),
        ("bn1", nn.BatchNorm2d(2)),
        ("act1", nn.Tanh()),
        ("flatten", nn.Flatten()),
        ("fc", nn.Linear(2 * side * side, num_classes)),
    ]))

def _scalar_linear(num_classes: int, image_size: int) -> nn.Module:
    return nn.Linear(1, 1, bias=False)

ARCHITECTURES: Dict[str, Callable[[int, int], nn.Module]] = {
    "toy-cnn": _toy_cnn,
    "tiny-cnn": _tiny_cnn,
    "scalar-linear": _scalar_linear,
}

def input_shape_for(arch_id: str, image_size: int):
    if arch_id == "scalar-linear":
        return (1,)
    return (3, image_size, image_size)

def build_model(arch_id: str, seed: int = 0, num_classes: int = 10, image_size: int = 8,
                dtype: torch.dtype = torch.float32) -> ModelHandle:
    """Build a registered architecture with a seeded initialization"""
    factory = ARCHITECTURES.get(arch_id)
    if factory is None:
        raise ArchitectureMismatchError(
            f"Unknown architecture '{arch_id}', expected one of {sorted(ARCHITECTURES)}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory(num_classes, image_size).to(dtype)
    return ModelHandle(module, arch_id, input_shape_for(arch_id, image_size),
                       seed=seed, num_classes=num_classes)
