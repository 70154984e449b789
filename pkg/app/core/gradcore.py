import copy
import math
import torch
import torch.nn as nn
import torch.nn.functional as F

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from app.exceptions.lab_errors import (
    BundleMismatchError,
    EmptyBatchError,
    InputShapeError,
    InvalidPartitionError,
    MaskMismatchError,
)
from app.utils.validators import validate_fraction, validate_positive_int

IndexSet = Sequence[int]

class LossKind(str, Enum):
    CROSS_ENTROPY = "cross-entropy"
    SQUARED_ERROR = "squared-error"

class Reduction(str, Enum):
    PER_EXAMPLE = "per-example"
    SUBSET_SUM = "subset-sum"
    BATCH_MEAN = "batch-mean"

_LINEAR_TYPES = (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.Linear)
_LAYER_KINDS = (
    (nn.Conv2d, "convolutional"),
    (nn.Linear, "dense"),
    (nn.modules.batchnorm._BatchNorm, "batch-norm"),
    (nn.modules.pooling._AvgPoolNd, "pooling"),
    (nn.modules.pooling._MaxPoolNd, "pooling"),
    (nn.modules.pooling._AdaptiveAvgPoolNd, "pooling"),
    (nn.ReLU, "activation"),
    (nn.Tanh, "activation"),
    (nn.Softplus, "activation"),
)


@dataclass(frozen=True)
class LabeledBatch:
    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, indices: IndexSet) -> "LabeledBatch":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return LabeledBatch(self.images[index], self.labels[index])

    @staticmethod
    def concat(batches: Sequence["LabeledBatch"]) -> "LabeledBatch":
        return LabeledBatch(
            torch.cat([b.images for b in batches]),
            torch.cat([b.labels for b in batches]),
        )


class ModelHandle:
    """
    A classifier with stable, lexically ordered parameter names.
    Gradients are always taken through one training-mode forward of the full batch,
    so per-example gradients share the batch statistics and sum to B times the batch mean.
    """

    def __init__(self, module: nn.Module, arch_id: str, input_shape: Sequence[int],
                 seed: int = 0, num_classes: Optional[int] = None):
        self.module = module
        self.arch_id = arch_id
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = seed
        self.num_classes = num_classes

    @property
    def parameter_names(self) -> List[str]:
        return sorted(name for name, _ in self.module.named_parameters())

    @property
    def params(self) -> "OrderedDict[str, nn.Parameter]":
        named = dict(self.module.named_parameters())
        return OrderedDict((name, named[name]) for name in self.parameter_names)

    @property
    def linear_layer_names(self) -> List[str]:
        names = []
        for module_name, module in self.module.named_modules():
            if isinstance(module, _LINEAR_TYPES):
                names.append(f"{module_name}.weight" if module_name else "weight")
        return sorted(names)

    @property
    def layers(self) -> List[Tuple[str, str]]:
        """Leaf layers in registration order with their kind"""
        result = []
        for name, module in self.module.named_modules():
            if list(module.children()):
                continue
            kind = next((k for t, k in _LAYER_KINDS if isinstance(module, t)), "other")
            result.append((name, kind))
        return result

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.params.items()}

    def copy(self) -> "ModelHandle":
        return ModelHandle(copy.deepcopy(self.module), self.arch_id, self.input_shape,
                           self.seed, self.num_classes)

    def to(self, target) -> "ModelHandle":
        """Move to a dtype or a device"""
        self.module.to(target)
        return self

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Training-mode forward; batch-norm uses the statistics of `images`"""
        self._check_input(images)
        self.module.train()
        with preserved_buffers(self.module):
            return self.module(images.to(device=self.device, dtype=self.dtype))

    def load_parameters(self, values: Dict[str, torch.Tensor]) -> None:
        params = self.params
        if set(values) != set(params):
            raise BundleMismatchError("Parameter names do not match the model")
        with torch.no_grad():
            for name, param in params.items():
                if tuple(values[name].shape) != tuple(param.shape):
                    raise BundleMismatchError(f"Shape mismatch for parameter '{name}'")
                param.copy_(values[name].to(param.dtype))

    def _check_input(self, images: torch.Tensor) -> None:
        if tuple(images.shape[1:]) != self.input_shape:
            raise InputShapeError(self.input_shape, images.shape[1:])


@contextmanager
def preserved_buffers(module: nn.Module) -> Iterator[None]:
    """Restore running batch-norm statistics after a training-mode forward"""
    saved = [
        (owner, name, buffer.detach().clone())
        for owner in module.modules()
        for name, buffer in owner.named_buffers(recurse=False)
    ]
    try:
        yield
    finally:
        # Rebind; the live graph still holds the old tensors.
        for owner, name, value in saved:
            setattr(owner, name, value)


@dataclass
class GradientBundle:
    entries: "OrderedDict[str, torch.Tensor]"
    reduction: Reduction = Reduction.BATCH_MEAN

    def __post_init__(self):
        self.entries = OrderedDict((name, self.entries[name]) for name in sorted(self.entries))

    @property
    def names(self) -> List[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def _check_compatible(self, other: "GradientBundle") -> None:
        if self.names != other.names:
            raise BundleMismatchError()
        for name in self.names:
            if self.entries[name].shape != other.entries[name].shape:
                raise BundleMismatchError(f"Shape mismatch for parameter '{name}'")

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        self._check_compatible(other)
        return GradientBundle(
            OrderedDict((n, self.entries[n] + other.entries[n]) for n in self.names),
            self.reduction if self.reduction == other.reduction else Reduction.SUBSET_SUM,
        )

    def __mul__(self, scalar: float) -> "GradientBundle":
        return GradientBundle(
            OrderedDict((n, t * scalar) for n, t in self.entries.items()), self.reduction
        )

    __rmul__ = __mul__

    def layer_norms(self) -> Dict[str, float]:
        return {n: float(torch.linalg.vector_norm(t)) for n, t in self.entries.items()}

    def detach(self) -> "GradientBundle":
        return GradientBundle(
            OrderedDict((n, t.detach()) for n, t in self.entries.items()), self.reduction
        )

    def matches(self, shapes: Dict[str, Tuple[int, ...]]) -> bool:
        return self.names == sorted(shapes) and all(
            tuple(self.entries[n].shape) == tuple(shapes[n]) for n in self.names
        )

    @staticmethod
    def zeros_like(model: ModelHandle, reduction: Reduction = Reduction.SUBSET_SUM) -> "GradientBundle":
        return GradientBundle(
            OrderedDict((n, torch.zeros_like(p)) for n, p in model.params.items()), reduction
        )


@dataclass(frozen=True)
class SubsampleMask:
    indices: Dict[str, torch.Tensor]
    sizes: Dict[str, int]
    fraction: float
    min_per_param: int
    seed: int

    @property
    def names(self) -> List[str]:
        return sorted(self.indices)

    @property
    def n_sub(self) -> int:
        return sum(int(idx.numel()) for idx in self.indices.values())

    def to_manifest(self) -> dict:
        return {
            "fraction": self.fraction,
            "min_per_param": self.min_per_param,
            "seed": self.seed,
            "sizes": {n: self.sizes[n] for n in self.names},
            "indices": {n: self.indices[n].tolist() for n in self.names},
        }

    @staticmethod
    def from_manifest(data: dict) -> "SubsampleMask":
        return SubsampleMask(
            indices={n: torch.as_tensor(v, dtype=torch.long) for n, v in data["indices"].items()},
            sizes={n: int(v) for n, v in data["sizes"].items()},
            fraction=float(data["fraction"]),
            min_per_param=int(data["min_per_param"]),
            seed=int(data["seed"]),
        )


def _per_example_loss_values(outputs: torch.Tensor, labels: torch.Tensor, loss: LossKind) -> torch.Tensor:
    if loss == LossKind.CROSS_ENTROPY:
        return F.cross_entropy(outputs, labels.to(outputs.device).long(), reduction="none")
    targets = labels.to(device=outputs.device, dtype=outputs.dtype).reshape(outputs.shape)
    return ((outputs - targets) ** 2).reshape(outputs.shape[0], -1).sum(dim=1)


def per_example_losses(model: ModelHandle, batch: LabeledBatch,
                       loss: LossKind = LossKind.CROSS_ENTROPY) -> torch.Tensor:
    """Unreduced losses of one shared full-batch forward pass"""
    if len(batch) == 0:
        raise EmptyBatchError()
    return _per_example_loss_values(model.forward(batch.images), batch.labels, loss)


def _bundle(model: ModelHandle, grads, reduction: Reduction) -> GradientBundle:
    params = model.params
    entries = OrderedDict()
    for (name, param), grad in zip(params.items(), grads):
        entries[name] = torch.zeros_like(param) if grad is None else grad
    return GradientBundle(entries, reduction)


def batch_gradient(model: ModelHandle, batch: LabeledBatch,
                   loss: LossKind = LossKind.CROSS_ENTROPY) -> GradientBundle:
    """Gradient of the mean batch loss"""
    losses = per_example_losses(model, batch, loss)
    grads = torch.autograd.grad(losses.mean(), list(model.params.values()), allow_unused=True)
    return _bundle(model, grads, Reduction.BATCH_MEAN)


def per_example_gradients(model: ModelHandle, batch: LabeledBatch,
                          loss: LossKind = LossKind.CROSS_ENTROPY) -> List[GradientBundle]:
    """One bundle per example, each backpropagated through the shared full-batch graph"""
    losses = per_example_losses(model, batch, loss)
    params = list(model.params.values())
    bundles = []
    for i in range(losses.shape[0]):
        grads = torch.autograd.grad(losses[i], params, retain_graph=True, allow_unused=True)
        bundles.append(_bundle(model, grads, Reduction.PER_EXAMPLE))
    return bundles


def grouped_gradients(model: ModelHandle, batch: LabeledBatch, groups: Sequence[IndexSet],
                      loss: LossKind = LossKind.CROSS_ENTROPY, create_graph: bool = True,
                      scale: float = 1.0) -> List[GradientBundle]:
    """Gradients of the summed loss of each index group, from one forward pass"""
    losses = per_example_losses(model, batch, loss)
    params = list(model.params.values())
    bundles = []
    for group in groups:
        group = list(group)
        if not group:
            bundles.append(GradientBundle.zeros_like(model))
            continue
        if min(group) < 0 or max(group) >= len(batch):
            raise InvalidPartitionError(f"Index out of range for batch of size {len(batch)}")
        total = losses[torch.as_tensor(group, dtype=torch.long)].sum() * scale
        grads = torch.autograd.grad(total, params, retain_graph=True,
                                    create_graph=create_graph, allow_unused=True)
        bundles.append(_bundle(model, grads, Reduction.SUBSET_SUM))
    return bundles


def subset_gradients(model: ModelHandle, batch: LabeledBatch, i_nul: IndexSet, i_rec: IndexSet,
                     loss: LossKind = LossKind.CROSS_ENTROPY,
                     create_graph: bool = True) -> Tuple[GradientBundle, GradientBundle]:
    """(g_nul, g_rec) for a partition of the batch, differentiable w.r.t. the parameters"""
    nul, rec = set(i_nul), set(i_rec)
    if nul & rec or len(nul) != len(list(i_nul)) or len(rec) != len(list(i_rec)):
        raise InvalidPartitionError("Index sets overlap")
    if nul | rec != set(range(len(batch))):
        raise InvalidPartitionError("Index sets do not cover the batch")
    g_nul, g_rec = grouped_gradients(model, batch, [sorted(nul), sorted(rec)], loss, create_graph)
    return g_nul, g_rec


def make_subsample_mask(model: ModelHandle, fraction: float, min_per_param: int,
                        seed: int) -> SubsampleMask:
    """Random per-parameter entry selection, deterministic given the seed"""
    fraction = validate_fraction(fraction, "fraction")
    min_per_param = validate_positive_int(min_per_param, "min_per_param")
    generator = torch.Generator().manual_seed(int(seed))
    indices, sizes = {}, {}
    for name, param in model.params.items():
        size = param.numel()
        count = min(size, max(math.ceil(fraction * size), min(min_per_param, size)))
        if count == size:
            chosen = torch.arange(size)
        else:
            chosen = torch.sort(torch.randperm(size, generator=generator)[:count]).values
        indices[name] = chosen
        sizes[name] = size
    return SubsampleMask(indices, sizes, fraction, min_per_param, int(seed))


def flatten_subsample(grad: GradientBundle, mask: SubsampleMask) -> torch.Tensor:
    """Masked gradient entries concatenated in parameter-name order"""
    if grad.names != mask.names:
        raise MaskMismatchError("Gradient and mask cover different parameters")
    pieces = []
    for name in mask.names:
        flat = grad.entries[name].reshape(-1)
        if flat.numel() != mask.sizes[name]:
            raise MaskMismatchError(f"Parameter '{name}' has {flat.numel()} entries, mask expects {mask.sizes[name]}")
        pieces.append(flat.index_select(0, mask.indices[name].to(flat.device)))
    return torch.cat(pieces)

