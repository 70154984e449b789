import numpy as np
import torch

from collections import OrderedDict
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

from app import logger
from app.core.datasets import ImageDataset
from app.core.gradcore import (
    GradientBundle,
    LabeledBatch,
    LossKind,
    ModelHandle,
    Reduction,
    batch_gradient,
    per_example_gradients,
)
from app.decorators.timing import timing
from app.exceptions.lab_errors import (
    AggregationError,
    BundleMismatchError,
    EmptyBatchError,
    ParameterError,
    PartitionError,
    SamplingError,
)
from app.utils.validators import (
    validate_nonnegative,
    validate_nonnegative_int,
    validate_positive,
    validate_positive_int,
)

class Aggregation(str, Enum):
    SINGLE_CLIENT = "single-client"
    SECURE_SUM_MEAN = "secure-sum-mean"


@dataclass(frozen=True)
class RoundConfig:
    batch_size: int
    num_clients: int = 1
    aggregation: Aggregation = Aggregation.SINGLE_CLIENT
    seed: int = 0

    def __post_init__(self):
        validate_positive_int(self.batch_size, "batch_size")
        validate_positive_int(self.num_clients, "num_clients")
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        if self.aggregation == Aggregation.SINGLE_CLIENT and self.num_clients != 1:
            raise ParameterError("single-client aggregation requires exactly one client")


@dataclass(frozen=True)
class DPConfig:
    clip_norm: float
    noise_multiplier: float = 0.0
    seed: int = 0

    def __post_init__(self):
        validate_positive(self.clip_norm, "clip_norm")
        validate_nonnegative(self.noise_multiplier, "noise_multiplier")
        validate_nonnegative_int(self.seed, "seed")

    @property
    def noise_std(self) -> float:
        return self.clip_norm * self.noise_multiplier


@dataclass(frozen=True)
class AggregateUpdate:
    gradient: GradientBundle
    total_examples: int
    provenance: Tuple[int, ...]

    def __post_init__(self):
        if self.total_examples != sum(self.provenance):
            raise AggregationError("total_examples must equal the sum of client counts")


def uniform_partition(n: int, num_clients: int, seed: int) -> List[np.ndarray]:
    """IID split of dataset indices into near-equal client shards"""
    if num_clients > n:
        raise PartitionError(f"Cannot split {n} examples across {num_clients} clients")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(order, num_clients)]


def dirichlet_partition(labels: Sequence[int], num_clients: int, alpha: float,
                        seed: int) -> List[np.ndarray]:
    """Split indices so each class is spread over clients by Dirichlet(alpha) proportions"""
    num_clients = validate_positive_int(num_clients, "num_clients")
    alpha = validate_positive(alpha, "alpha")
    labels = np.asarray(labels)
    if num_clients > len(labels):
        raise PartitionError(f"Cannot split {len(labels)} examples across {num_clients} clients")
    if num_clients == 1:
        return [np.arange(len(labels))]

    rng = np.random.default_rng(seed)
    shards: List[List[int]] = [[] for _ in range(num_clients)]
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(proportions)[:-1] * len(members)).astype(int)
        for client, chunk in enumerate(np.split(members, cuts)):
            shards[client].extend(chunk.tolist())
    return [np.sort(np.asarray(shard, dtype=np.int64)) for shard in shards]


def sample_client_batches(dataset: ImageDataset, partition: Sequence[np.ndarray], batch_size: int,
                          seed: int) -> List[LabeledBatch]:
    """One batch per client; without replacement when the shard is large enough"""
    batch_size = validate_positive_int(batch_size, "batch_size")
    rng = np.random.default_rng(seed)
    batches = []
    for client, shard in enumerate(partition):
        shard = np.asarray(shard)
        if shard.size == 0:
            raise SamplingError(f"Client {client} has no examples")
        replace_draws = shard.size < batch_size
        if replace_draws:
            logger.warning(f"Client {client} holds {shard.size} < {batch_size} examples; sampling with replacement")
        chosen = rng.choice(shard, size=batch_size, replace=replace_draws)
        batches.append(dataset.batch(chosen))
    return batches


def aggregate(updates: Sequence[Tuple[GradientBundle, int]]) -> AggregateUpdate:
    """Example-count-weighted mean of client batch-mean gradients"""
    if not updates:
        raise AggregationError("No client updates to aggregate")
    counts = tuple(int(count) for _, count in updates)
    if any(count <= 0 for count in counts):
        raise AggregationError("Client example counts must be positive")
    total = sum(counts)
    try:
        mean = None
        for bundle, count in updates:
            term = bundle * (count / total)
            mean = term if mean is None else mean + term
    except BundleMismatchError as e:
        raise AggregationError(f"Client updates come from different models: {e.message}")
    mean = GradientBundle(mean.entries, Reduction.BATCH_MEAN)
    return AggregateUpdate(mean, total, counts)


def clip_per_example(per_example_grads: Sequence[GradientBundle], clip_norm: float) -> List[GradientBundle]:
    """Rescale every per-layer gradient of every example to norm at most clip_norm"""
    clipped = []
    for bundle in per_example_grads:
        entries = OrderedDict()
        for name, tensor in bundle.entries.items():
            norm = float(torch.linalg.vector_norm(tensor))
            factor = 1.0 if norm == 0.0 else min(1.0, clip_norm / norm)
            entries[name] = tensor * factor
        clipped.append(GradientBundle(entries, Reduction.PER_EXAMPLE))
    return clipped


def round_noise_seed(dp_seed: int, round_index: int) -> int:
    """Seed of the noise stream for one round; distinct rounds draw independent noise"""
    round_index = validate_nonnegative_int(round_index, "round_index")
    return int(np.random.SeedSequence([int(dp_seed), round_index]).generate_state(1)[0])


def add_gaussian_noise(bundle: GradientBundle, std: float, seed: int) -> GradientBundle:
    if std == 0:
        return bundle
    generator = torch.Generator().manual_seed(int(seed))
    entries = OrderedDict()
    for name, tensor in bundle.entries.items():
        noise = torch.randn(tensor.shape, generator=generator, dtype=tensor.dtype)
        entries[name] = tensor + std * noise.to(tensor.device)
    return GradientBundle(entries, bundle.reduction)


def dp_transform(per_example_grads: Sequence[GradientBundle], dp: DPConfig,
                 round_index: int = 0) -> GradientBundle:
    """DP-SGD: per-example per-layer clipping, mean, then Gaussian noise of std clip_norm*sigma"""
    if not per_example_grads:
        raise EmptyBatchError("DP transform needs at least one per-example gradient")
    clipped = clip_per_example(per_example_grads, dp.clip_norm)
    mean = None
    for bundle in clipped:
        mean = bundle if mean is None else mean + bundle
    mean = GradientBundle((mean * (1.0 / len(clipped))).entries, Reduction.BATCH_MEAN)
    return add_gaussian_noise(mean, dp.noise_std, round_noise_seed(dp.seed, round_index))


def aggregate_round(model: ModelHandle, client_batches: Sequence[LabeledBatch],
                    loss: LossKind = LossKind.CROSS_ENTROPY,
                    dp: Optional[DPConfig] = None, round_index: int = 0) -> AggregateUpdate:
    """Per-client gradients (optionally clipped), aggregated, with fresh DP noise for `round_index` added once"""
    updates = []
    for batch in client_batches:
        if dp is None:
            grad = batch_gradient(model, batch, loss)
        else:
            grad = dp_transform(per_example_gradients(model, batch, loss),
                                replace(dp, noise_multiplier=0.0))
        updates.append((grad.detach(), len(batch)))
    update = aggregate(updates)
    if dp is not None and dp.noise_multiplier > 0:
        noisy = add_gaussian_noise(update.gradient, dp.noise_std, round_noise_seed(dp.seed, round_index))
        update = AggregateUpdate(noisy, update.total_examples, update.provenance)
    return update


@timing("fedsim.simulate_round")
def simulate_round(model: ModelHandle, dataset: ImageDataset, partition: Sequence[np.ndarray],
                   round_config: RoundConfig, dp: Optional[DPConfig] = None,
                   loss: LossKind = LossKind.CROSS_ENTROPY) -> AggregateUpdate:
    """The update the server observes for one FedSGD round"""
    if len(partition) != round_config.num_clients:
        raise PartitionError(f"Partition has {len(partition)} shards for {round_config.num_clients} clients")
    batches = sample_client_batches(dataset, partition, round_config.batch_size, round_config.seed)
    return aggregate_round(model, batches, loss, dp, round_index=round_config.seed)


def run_honest_rounds(model: ModelHandle, dataset: ImageDataset, partition: Sequence[np.ndarray],
                      round_config: RoundConfig, n_rounds: int, learning_rate: float,
                      loss: LossKind = LossKind.CROSS_ENTROPY) -> ModelHandle:
    """Apply plain SGD steps on aggregated updates, drifting the released model in place"""
    n_rounds = validate_nonnegative_int(n_rounds, "n_rounds")
    learning_rate = validate_positive(learning_rate, "learning_rate")
    for r in range(n_rounds):
        update = simulate_round(model, dataset, partition,
                                replace(round_config, seed=round_config.seed + 7919 * (r + 1)), loss=loss)
        with torch.no_grad():
            for name, param in model.params.items():
                param.sub_(learning_rate * update.gradient[name])
        logger.info(f"Honest round {r + 1}/{n_rounds} applied with learning rate {learning_rate}")
    return model
