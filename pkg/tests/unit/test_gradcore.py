import math
import pytest
import torch
import torch.nn as nn

from app.core.datasets import generate_synthetic
from app.core.gradcore import (
    GradientBundle,
    LabeledBatch,
    LossKind,
    ModelHandle,
    Reduction,
    SubsampleMask,
    batch_gradient,
    flatten_subsample,
    grouped_gradients,
    make_subsample_mask,
    per_example_gradients,
    per_example_losses,
    subset_gradients,
)
from app.core.models import build_model
from app.exceptions.lab_errors import (
    BundleMismatchError,
    EmptyBatchError,
    InputShapeError,
    InvalidPartitionError,
    MaskMismatchError,
)

@pytest.fixture
def model():
    """Fixture providing a float64 CNN with batch-norm."""
    return build_model("toy-cnn", seed=3, num_classes=4, image_size=8, dtype=torch.float64)

@pytest.fixture
def tiny_model():
    """Fixture providing a float64 CNN with fewer than one hundred parameters."""
    return build_model("tiny-cnn", seed=5, num_classes=3, image_size=4, dtype=torch.float64)

@pytest.fixture
def batch():
    """Fixture providing a batch of eight synthetic images."""
    dataset = generate_synthetic(8, image_size=8, num_classes=4, seed=11)
    return LabeledBatch(dataset.images.double(), dataset.labels)

@pytest.fixture
def tiny_batch():
    """Fixture providing a batch of five 4x4 images."""
    dataset = generate_synthetic(5, image_size=4, num_classes=3, seed=2)
    return LabeledBatch(dataset.images.double(), dataset.labels)

def _assert_bundles_close(a, b, rtol=1e-5, atol=1e-10):
    assert a.names == b.names
    for name in a.names:
        torch.testing.assert_close(a[name], b[name], rtol=rtol, atol=atol)

def test_parameter_names_are_sorted(model):
    """Test that parameter names come in ascending lexical order."""
    names = model.parameter_names
    assert names == sorted(names)
    assert "fc.weight" in names
    assert model.linear_layer_names == ["conv1.weight", "conv2.weight", "fc.weight"]

def test_layers_report_kinds(model):
    """Test that leaf layers are listed in registration order with their kind."""
    kinds = dict(model.layers)
    assert model.layers[0] == ("conv1", "convolutional")
    assert kinds["bn1"] == "batch-norm"
    assert kinds["fc"] == "dense"

def test_additivity_with_batch_norm(model, batch):
    """Test that per-example gradients average to the batch gradient."""
    per_example = per_example_gradients(model, batch)
    mean = per_example[0]
    for bundle in per_example[1:]:
        mean = mean + bundle
    mean = mean * (1.0 / len(batch))
    _assert_bundles_close(mean, batch_gradient(model, batch))

def test_additivity_with_squared_error():
    """Test additivity for the toy squared-error loss."""
    model = build_model("scalar-linear", seed=1, dtype=torch.float64)
    batch = LabeledBatch(torch.tensor([[1.0], [2.0], [-1.0]], dtype=torch.float64),
                         torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64))
    per_example = per_example_gradients(model, batch, LossKind.SQUARED_ERROR)
    total = sum(float(g["weight"]) for g in per_example)
    assert math.isclose(total / 3, float(batch_gradient(model, batch, LossKind.SQUARED_ERROR)["weight"]),
                        rel_tol=1e-12)

def test_scalar_linear_gradient_closed_form():
    """Test the per-example gradient 2x(wx - y) of a scalar linear model."""
    model = build_model("scalar-linear", seed=0, dtype=torch.float64)
    model.load_parameters({"weight": torch.tensor([[2.0]], dtype=torch.float64)})
    batch = LabeledBatch(torch.tensor([[3.0]], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    grad = per_example_gradients(model, batch, LossKind.SQUARED_ERROR)[0]
    assert float(grad["weight"]) == pytest.approx(2 * 3.0 * (2.0 * 3.0 - 1.0))

def test_forward_preserves_running_statistics(model, batch):
    """Test that training-mode forwards leave batch-norm running statistics untouched."""
    before = {n: b.clone() for n, b in model.module.named_buffers()}
    per_example_gradients(model, batch)
    for name, buffer in model.module.named_buffers():
        assert torch.equal(buffer, before[name])

def test_per_example_gradients_after_forward_on_batch_norm_model(tiny_model, tiny_batch):
    """Test that a training-mode forward leaves the batch-norm graph differentiable."""
    losses = per_example_losses(tiny_model, tiny_batch)
    params = list(tiny_model.params.values())
    first = torch.autograd.grad(losses[0], params, retain_graph=True, allow_unused=True)
    second = torch.autograd.grad(losses[1], params, allow_unused=True)
    assert all(g is None or torch.isfinite(g).all() for g in first + second)
    bundles = per_example_gradients(tiny_model, tiny_batch)
    assert len(bundles) == len(tiny_batch)
    assert bundles[0]["bn1.weight"].shape == (2,)
    assert torch.equal(tiny_model.module.bn1.running_mean, torch.zeros(2, dtype=torch.float64))

def test_gradients_are_deterministic(model, batch):
    """Test that repeated computations give identical gradients."""
    _assert_bundles_close(batch_gradient(model, batch), batch_gradient(model, batch), rtol=0, atol=0)

def test_subset_gradients_partition_the_sum(model, batch):
    """Test that g_nul + g_rec equals B times the batch-mean gradient."""
    g_nul, g_rec = subset_gradients(model, batch, [0, 2, 3, 4, 5, 6, 7], [1])
    assert g_nul.reduction == Reduction.SUBSET_SUM
    _assert_bundles_close(g_nul + g_rec, batch_gradient(model, batch) * len(batch))

def test_subset_gradients_single_example_matches_per_example(model, batch):
    """Test that a one-example recovery set gives that example's gradient."""
    _, g_rec = subset_gradients(model, batch, [0, 1, 2, 3, 4, 5, 7], [6], create_graph=False)
    _assert_bundles_close(g_rec, per_example_gradients(model, batch)[6])

def test_subset_gradients_empty_nul_set(model, batch):
    """Test that an empty nul set gives a zero bundle."""
    g_nul, _ = subset_gradients(model, batch, [], list(range(len(batch))))
    assert all(float(t.abs().sum()) == 0.0 for t in g_nul.entries.values())

def test_subset_gradients_invalid_partition(model, batch):
    """Test that overlapping or incomplete index sets are rejected."""
    with pytest.raises(InvalidPartitionError):
        subset_gradients(model, batch, [0, 1, 2, 3, 4, 5, 6], [6, 7])
    with pytest.raises(InvalidPartitionError):
        subset_gradients(model, batch, [0, 1, 2], [3])

def test_grouped_gradients_scale(model, batch):
    """Test that the scale argument multiplies the group gradient."""
    plain, = grouped_gradients(model, batch, [[0, 1]], create_graph=False)
    scaled, = grouped_gradients(model, batch, [[0, 1]], create_graph=False, scale=0.25)
    _assert_bundles_close(plain * 0.25, scaled)

def test_grouped_gradients_out_of_range(model, batch):
    """Test that indices outside the batch are rejected."""
    with pytest.raises(InvalidPartitionError):
        grouped_gradients(model, batch, [[0, 8]])

def test_second_order_gradient_matches_finite_differences(tiny_model, tiny_batch):
    """Test differentiating a function of subset gradients against central differences."""
    assert tiny_model.parameter_count <= 100

    def objective(create_graph):
        _, g_rec = subset_gradients(tiny_model, tiny_batch, [0, 1, 3, 4], [2], create_graph=create_graph)
        return sum((t ** 2).sum() for t in g_rec.entries.values())

    params = tiny_model.params
    analytic = dict(zip(params, torch.autograd.grad(objective(True), list(params.values()))))

    step = 1e-4
    for name in ("conv1.weight", "bn1.weight", "fc.weight", "fc.bias"):
        flat = params[name].data.view(-1)
        numeric = torch.zeros_like(flat)
        for k in range(flat.numel()):
            original = float(flat[k])
            flat[k] = original + step
            plus = float(objective(False))
            flat[k] = original - step
            minus = float(objective(False))
            flat[k] = original
            numeric[k] = (plus - minus) / (2 * step)
        error = torch.linalg.vector_norm(numeric - analytic[name].reshape(-1))
        assert float(error) <= 1e-3 * float(torch.linalg.vector_norm(numeric)) + 1e-9

def test_empty_batch(model):
    """Test that an empty batch is rejected."""
    empty = LabeledBatch(torch.zeros(0, 3, 8, 8, dtype=torch.float64), torch.zeros(0, dtype=torch.long))
    with pytest.raises(EmptyBatchError):
        per_example_losses(model, empty)

def test_input_shape_mismatch(model):
    """Test that inputs of the wrong shape are rejected."""
    batch = LabeledBatch(torch.zeros(2, 3, 6, 6, dtype=torch.float64), torch.zeros(2, dtype=torch.long))
    with pytest.raises(InputShapeError):
        batch_gradient(model, batch)

def test_bundle_mismatch(model):
    """Test that bundles over different parameters cannot be added."""
    other = ModelHandle(nn.Linear(2, 2), "linear", (2,))
    with pytest.raises(BundleMismatchError):
        GradientBundle.zeros_like(model) + GradientBundle.zeros_like(other)

def test_mask_is_deterministic(model):
    """Test that the same seed yields identical masks."""
    a = make_subsample_mask(model, 0.1, 4, seed=9)
    b = make_subsample_mask(model, 0.1, 4, seed=9)
    c = make_subsample_mask(model, 0.1, 4, seed=10)
    assert all(torch.equal(a.indices[n], b.indices[n]) for n in a.names)
    assert any(not torch.equal(a.indices[n], c.indices[n]) for n in a.names)

def test_mask_cardinality(model):
    """Test the per-parameter count min(size, max(ceil(q*size), min(m, size)))."""
    mask = make_subsample_mask(model, 0.1, 20, seed=0)
    for name, param in model.params.items():
        size = param.numel()
        expected = min(size, max(math.ceil(0.1 * size), min(20, size)))
        indices = mask.indices[name]
        assert indices.numel() == expected
        assert len(set(indices.tolist())) == expected
        assert int(indices.max()) < size

def test_full_mask_covers_every_parameter(model, batch):
    """Test that fraction 1.0 flattens the whole gradient in name order."""
    mask = make_subsample_mask(model, 1.0, 1, seed=0)
    grad = batch_gradient(model, batch)
    flat = flatten_subsample(grad, mask)
    assert flat.numel() == model.parameter_count
    expected = torch.cat([grad[n].reshape(-1) for n in sorted(grad.names)])
    assert torch.equal(flat, expected)

def test_mask_manifest_round_trip(model):
    """Test that a mask survives its manifest form."""
    mask = make_subsample_mask(model, 0.05, 3, seed=4)
    restored = SubsampleMask.from_manifest(mask.to_manifest())
    assert restored.n_sub == mask.n_sub
    assert all(torch.equal(restored.indices[n], mask.indices[n]) for n in mask.names)

def test_flatten_with_foreign_mask(model, batch):
    """Test that a mask built for another model is rejected."""
    other = ModelHandle(nn.Linear(2, 2), "linear", (2,))
    mask = make_subsample_mask(other, 1.0, 1, seed=0)
    with pytest.raises(MaskMismatchError):
        flatten_subsample(batch_gradient(model, batch), mask)
