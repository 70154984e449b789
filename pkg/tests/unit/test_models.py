import pytest
import torch

from app.core.models import ARCHITECTURES, build_model, input_shape_for
from app.exceptions.lab_errors import ArchitectureMismatchError

def test_build_model_is_seeded():
    """Test that the same seed gives identical weights."""
    a = build_model("toy-cnn", seed=4)
    b = build_model("toy-cnn", seed=4)
    c = build_model("toy-cnn", seed=5)
    assert all(torch.equal(a.params[n], b.params[n]) for n in a.parameter_names)
    assert not torch.equal(a.params["fc.weight"], c.params["fc.weight"])

def test_build_model_leaves_global_rng_alone():
    """Test that building a model does not advance the global torch generator."""
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model("toy-cnn", seed=9)
    assert torch.equal(torch.rand(3), expected)

def test_toy_cnn_size_and_output():
    """Test that the toy classifier stays small and maps images to class logits."""
    model = build_model("toy-cnn", seed=0, num_classes=10, image_size=8)
    assert model.parameter_count <= 100_000
    assert model.input_shape == (3, 8, 8)
    assert model.forward(torch.rand(4, 3, 8, 8)).shape == (4, 10)

def test_dtype_is_applied():
    """Test that the requested dtype is used for every parameter."""
    model = build_model("tiny-cnn", seed=0, image_size=4, dtype=torch.float64)
    assert model.dtype == torch.float64
    assert all(p.dtype == torch.float64 for p in model.params.values())

def test_scalar_linear_shape():
    """Test the one-weight toy model."""
    model = build_model("scalar-linear")
    assert model.parameter_names == ["weight"]
    assert model.input_shape == input_shape_for("scalar-linear", 8) == (1,)

def test_copy_is_independent():
    """Test that a copied handle does not share parameters."""
    model = build_model("toy-cnn", seed=0)
    clone = model.copy()
    with torch.no_grad():
        clone.params["fc.bias"].add_(1.0)
    assert not torch.equal(model.params["fc.bias"], clone.params["fc.bias"])
    assert clone.arch_id == "toy-cnn"

def test_registered_architectures():
    """Test the registry of toy architectures."""
    assert set(ARCHITECTURES) == {"toy-cnn", "tiny-cnn", "scalar-linear"}

def test_unknown_architecture():
    """Test that an unknown architecture id is rejected."""
    with pytest.raises(ArchitectureMismatchError):
        build_model("resnet18")
