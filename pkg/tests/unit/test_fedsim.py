import dataclasses
import numpy as np
import pytest
import torch

from collections import OrderedDict

from app.core.datasets import generate_synthetic
from app.core.fedsim import (
    AggregateUpdate,
    Aggregation,
    DPConfig,
    RoundConfig,
    add_gaussian_noise,
    aggregate,
    aggregate_round,
    clip_per_example,
    dirichlet_partition,
    dp_transform,
    round_noise_seed,
    run_honest_rounds,
    sample_client_batches,
    simulate_round,
    uniform_partition,
)
from app.core.gradcore import (
    GradientBundle,
    LabeledBatch,
    LossKind,
    Reduction,
    batch_gradient,
    per_example_gradients,
)
from app.core.models import build_model
from app.exceptions.lab_errors import (
    AggregationError,
    EmptyBatchError,
    ParameterError,
    PartitionError,
    SamplingError,
)

@pytest.fixture
def dataset():
    """Fixture providing a small synthetic dataset."""
    return generate_synthetic(64, image_size=8, num_classes=4, seed=0)

@pytest.fixture
def model():
    """Fixture providing a float64 classifier."""
    return build_model("toy-cnn", seed=1, num_classes=4, image_size=8, dtype=torch.float64)

def _bundle(**entries):
    return GradientBundle(OrderedDict((k, torch.tensor(v, dtype=torch.float64)) for k, v in entries.items()))

def _assert_bundles_close(a, b, rtol=1e-7, atol=1e-12):
    assert a.names == b.names
    for name in a.names:
        torch.testing.assert_close(a[name], b[name], rtol=rtol, atol=atol)

def test_round_config_validation():
    """Test that single-client aggregation demands exactly one client."""
    assert RoundConfig(16).aggregation == Aggregation.SINGLE_CLIENT
    assert RoundConfig(16, 4, "secure-sum-mean").aggregation == Aggregation.SECURE_SUM_MEAN
    with pytest.raises(ParameterError):
        RoundConfig(16, 2, Aggregation.SINGLE_CLIENT)
    with pytest.raises(ParameterError):
        RoundConfig(0)

def test_dp_config_validation():
    """Test that the clipping norm is positive and the noise multiplier nonnegative."""
    assert DPConfig(2.0, 0.5).noise_std == 1.0
    with pytest.raises(ParameterError):
        DPConfig(0.0)
    with pytest.raises(ParameterError):
        DPConfig(1.0, -0.1)

def test_aggregate_update_invariant():
    """Test that the total must equal the sum of client counts."""
    with pytest.raises(AggregationError):
        AggregateUpdate(_bundle(w=[0.0]), 5, (2, 2))

def test_aggregate_equal_counts():
    """Test that equal counts give the plain mean."""
    update = aggregate([(_bundle(w=[1.0, 2.0]), 4), (_bundle(w=[3.0, 4.0]), 4)])
    assert update.gradient["w"].tolist() == [2.0, 3.0]
    assert update.total_examples == 8
    assert update.provenance == (4, 4)

def test_aggregate_single_client_is_identity():
    """Test that one client's update passes through unchanged."""
    update = aggregate([(_bundle(w=[1.5, -2.0]), 3)])
    assert update.gradient["w"].tolist() == [1.5, -2.0]

def test_aggregate_weighted_counts():
    """Test the example-count-weighted mean."""
    update = aggregate([(_bundle(w=[0.0]), 1), (_bundle(w=[4.0]), 3)])
    assert update.gradient["w"].tolist() == [3.0]
    assert update.gradient.reduction == Reduction.BATCH_MEAN

def test_aggregate_is_linear():
    """Test that aggregation distributes over scalar-scaled bundles."""
    generator = torch.Generator().manual_seed(0)
    bundles = [GradientBundle(OrderedDict(w=torch.randn(5, generator=generator, dtype=torch.float64)))
               for _ in range(3)]
    counts = [2, 5, 1]
    plain = aggregate(list(zip(bundles, counts))).gradient
    scaled = aggregate([(b * 2.5, c) for b, c in zip(bundles, counts)]).gradient
    _assert_bundles_close(scaled, plain * 2.5)

def test_aggregate_errors():
    """Test that empty or mismatched updates are rejected."""
    with pytest.raises(AggregationError):
        aggregate([])
    with pytest.raises(AggregationError):
        aggregate([(_bundle(w=[1.0]), 1), (_bundle(v=[1.0]), 1)])
    with pytest.raises(AggregationError):
        aggregate([(_bundle(w=[1.0]), 0)])

def test_clip_single_layer():
    """Test that a layer of norm 10 is clipped to norm 3."""
    clipped = dp_transform([_bundle(w=[6.0, 8.0])], DPConfig(3.0))
    assert float(torch.linalg.vector_norm(clipped["w"])) == pytest.approx(3.0)

def test_clip_inactive_gives_plain_mean():
    """Test that gradients under the clipping norm are averaged unchanged."""
    result = dp_transform([_bundle(w=[0.1, 0.2]), _bundle(w=[0.3, 0.0])], DPConfig(10.0))
    torch.testing.assert_close(result["w"], torch.tensor([0.2, 0.1], dtype=torch.float64))

def test_clip_bound_on_real_gradients(model, dataset):
    """Test that every clipped per-layer per-example norm stays within the bound."""
    grads = per_example_gradients(model, dataset.batch(range(8)))
    for bundle in clip_per_example(grads, 0.05):
        assert all(norm <= 0.05 + 1e-6 for norm in bundle.layer_norms().values())

def test_gaussian_noise_statistics():
    """Test that noise has zero mean and standard deviation C*sigma."""
    dp = DPConfig(clip_norm=1.0, noise_multiplier=0.01, seed=3)
    zeros = GradientBundle(OrderedDict(w=torch.zeros(10_000, dtype=torch.float64)))
    noise = add_gaussian_noise(zeros, dp.noise_std, dp.seed)["w"]
    assert abs(float(noise.mean())) <= 4 * 0.01 / np.sqrt(10_000)
    assert float(noise.std()) == pytest.approx(0.01, rel=0.05)

def test_gaussian_noise_is_seeded():
    """Test that the same seed yields the same noise."""
    zeros = GradientBundle(OrderedDict(w=torch.zeros(10, dtype=torch.float64)))
    assert torch.equal(add_gaussian_noise(zeros, 0.1, 5)["w"], add_gaussian_noise(zeros, 0.1, 5)["w"])
    assert not torch.equal(add_gaussian_noise(zeros, 0.1, 5)["w"], add_gaussian_noise(zeros, 0.1, 6)["w"])

def test_dp_transform_empty():
    """Test that an empty input is rejected."""
    with pytest.raises(EmptyBatchError):
        dp_transform([], DPConfig(1.0))

def test_uniform_partition():
    """Test that the IID split covers every index once."""
    parts = uniform_partition(10, 3, seed=0)
    assert len(parts) == 3
    assert sorted(np.concatenate(parts).tolist()) == list(range(10))
    with pytest.raises(PartitionError):
        uniform_partition(2, 3, seed=0)

def test_dirichlet_partition_single_client():
    """Test that one client receives every index."""
    parts = dirichlet_partition([0, 1, 1, 2], 1, 0.5, seed=0)
    assert len(parts) == 1
    assert parts[0].tolist() == [0, 1, 2, 3]

def test_dirichlet_partition_is_disjoint_and_deterministic():
    """Test that the partition is complete, disjoint and seeded."""
    labels = np.random.default_rng(0).integers(0, 5, size=500)
    parts = dirichlet_partition(labels, 4, 0.3, seed=7)
    again = dirichlet_partition(labels, 4, 0.3, seed=7)
    assert sorted(np.concatenate(parts).tolist()) == list(range(500))
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))

def test_dirichlet_partition_large_alpha_is_near_uniform():
    """Test that a large concentration spreads every class evenly on average over seeds."""
    labels = np.repeat(np.arange(10), 1000)
    histograms = np.zeros((10, 10))
    for seed in range(20):
        for client, part in enumerate(dirichlet_partition(labels, 10, 100.0, seed=seed)):
            histograms[client] += np.bincount(labels[part], minlength=10)
    histograms /= 20
    assert np.all(np.abs(histograms - 100) <= 20)

def test_dirichlet_partition_too_many_clients():
    """Test that more clients than examples is rejected."""
    with pytest.raises(PartitionError):
        dirichlet_partition([0, 1], 3, 1.0, seed=0)

def test_sample_client_batches_full_shard(dataset):
    """Test that a batch the size of its shard is a permutation of the shard."""
    shard = np.arange(10, 26)
    batch, = sample_client_batches(dataset, [shard], 16, seed=0)
    members = {tuple(dataset.images[i].reshape(-1).tolist()) for i in shard}
    assert {tuple(img.reshape(-1).tolist()) for img in batch.images} == members

def test_sample_client_batches_is_seeded(dataset):
    """Test that the same seed gives identical batches."""
    parts = uniform_partition(len(dataset), 2, seed=0)
    a = sample_client_batches(dataset, parts, 8, seed=4)
    b = sample_client_batches(dataset, parts, 8, seed=4)
    assert all(torch.equal(x.images, y.images) for x, y in zip(a, b))

def test_sample_client_batches_small_shard_uses_replacement(dataset):
    """Test that an undersized shard is sampled with replacement."""
    batch, = sample_client_batches(dataset, [np.array([0, 1])], 5, seed=0)
    assert len(batch) == 5

def test_sample_client_batches_single_draw_frequencies(dataset):
    """Test that single-example draws are uniform over the shard."""
    shard = np.arange(4)
    counts = np.zeros(4)
    for seed in range(2000):
        batch, = sample_client_batches(dataset, [shard], 1, seed=seed)
        index = next(i for i in shard if torch.equal(dataset.images[i], batch.images[0]))
        counts[index] += 1
    sigma = np.sqrt(2000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 500) <= 3 * sigma)

def test_sample_client_batches_empty_shard(dataset):
    """Test that an empty shard is rejected."""
    with pytest.raises(SamplingError):
        sample_client_batches(dataset, [np.array([], dtype=np.int64)], 4, seed=0)

def test_simulate_round_single_client(model, dataset):
    """Test that one client without DP gives its batch gradient."""
    parts = [np.arange(len(dataset))]
    update = simulate_round(model, dataset, parts, RoundConfig(8, seed=2))
    batch, = sample_client_batches(dataset, parts, 8, seed=2)
    _assert_bundles_close(update.gradient, batch_gradient(model, batch))
    assert update.total_examples == 8

def test_simulate_round_identical_clients(model, dataset):
    """Test that two clients holding the same batch give that batch's gradient."""
    batch = dataset.batch(range(8))
    update = aggregate_round(model, [batch, batch])
    _assert_bundles_close(update.gradient, batch_gradient(model, batch))

def test_simulate_round_matches_manual_composition(model, dataset):
    """Test that four clients equal sampling, per-client gradients and aggregation done by hand."""
    parts = uniform_partition(len(dataset), 4, seed=1)
    config = RoundConfig(8, 4, Aggregation.SECURE_SUM_MEAN, seed=5)
    update = simulate_round(model, dataset, parts, config)
    batches = sample_client_batches(dataset, parts, 8, seed=5)
    manual = aggregate([(batch_gradient(model, b), len(b)) for b in batches])
    _assert_bundles_close(update.gradient, manual.gradient)
    assert update.provenance == (8, 8, 8, 8)

def test_simulate_round_is_not_a_large_batch(model, dataset):
    """Test that batch-norm statistics stay per client under secure aggregation."""
    batches = [dataset.batch(range(0, 8)), dataset.batch(range(8, 16))]
    per_client = aggregate_round(model, batches).gradient
    pooled = batch_gradient(model, dataset.batch(range(16)))
    assert not torch.allclose(per_client["conv1.weight"], pooled["conv1.weight"])

def test_simulate_round_exposes_only_the_aggregate(model, dataset):
    """Test that the observed update carries no per-client gradients."""
    parts = uniform_partition(len(dataset), 2, seed=0)
    update = simulate_round(model, dataset, parts, RoundConfig(4, 2, Aggregation.SECURE_SUM_MEAN))
    assert {f.name for f in dataclasses.fields(update)} == {"gradient", "total_examples", "provenance"}

def test_simulate_round_partition_size_mismatch(model, dataset):
    """Test that the partition must have one shard per client."""
    with pytest.raises(PartitionError):
        simulate_round(model, dataset, [np.arange(10)], RoundConfig(4, 2, Aggregation.SECURE_SUM_MEAN))

def test_aggregate_round_with_dp_clips(model, dataset):
    """Test that DP rounds respect the clipping bound per layer."""
    update = aggregate_round(model, [dataset.batch(range(8))], dp=DPConfig(0.01))
    assert all(norm <= 0.01 + 1e-9 for norm in update.gradient.layer_norms().values())

def test_dp_noise_is_fresh_every_round():
    """Test that each round draws its own noise and a round's noise is reproducible."""
    model = build_model("scalar-linear", seed=1, dtype=torch.float64)
    batch = LabeledBatch(torch.tensor([[1.0], [2.0]], dtype=torch.float64),
                         torch.tensor([0.5, 1.0], dtype=torch.float64))
    clean = float(aggregate_round(model, [batch], LossKind.SQUARED_ERROR, DPConfig(100.0))
                  .gradient["weight"])
    dp = DPConfig(clip_norm=100.0, noise_multiplier=0.01, seed=4)
    noise = [float(aggregate_round(model, [batch], LossKind.SQUARED_ERROR, dp, round_index=k)
                   .gradient["weight"]) - clean for k in (0, 1, 0)]
    assert noise[0] != noise[1]
    assert noise[0] == noise[2]
    assert round_noise_seed(4, 0) != round_noise_seed(4, 1)
    assert round_noise_seed(4, 0) != round_noise_seed(5, 0)

def test_round_index_must_be_nonnegative():
    """Test that a negative round index is rejected."""
    with pytest.raises(ParameterError):
        round_noise_seed(0, -1)

def test_run_honest_rounds(model, dataset):
    """Test that honest rounds move the parameters and zero rounds do not."""
    parts = [np.arange(len(dataset))]
    before = model.params["fc.weight"].detach().clone()
    run_honest_rounds(model, dataset, parts, RoundConfig(8), 0, 0.1)
    assert torch.equal(model.params["fc.weight"], before)
    run_honest_rounds(model, dataset, parts, RoundConfig(8), 2, 0.1)
    assert not torch.equal(model.params["fc.weight"], before)
