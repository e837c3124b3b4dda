import numpy as np
import pytest
from pydantic import ValidationError

from errors import ConfigError, DimensionError
from models import (
    VARIANTS,
    ModelSpec,
    analytic_layer_counts,
    analytic_param_count,
    build_model,
    forward_model,
    layer_counts,
    param_count,
    reference_spec,
    zero_grad,
)
from tensor import Tensor, backward, mse_loss

# Published sizes of the four non-backbone models, in ascending order.
PUBLISHED_SIZES = {"unet_dsc": 4.0e6, "smaat_unet": 4.1e6, "unet": 17.3e6, "unet_cbam": 17.4e6}


def small_spec(variant, **overrides):
    fields = dict(variant=variant, in_channels=5, out_channels=6, base_width=8, depth=3, cbam_reduction=4)
    fields.update(overrides)
    return ModelSpec(**fields)


@pytest.mark.parametrize("variant", VARIANTS)
def test_reference_sizes_within_three_percent(variant):
    n = analytic_param_count(reference_spec(variant))
    assert abs(n - PUBLISHED_SIZES[variant]) / PUBLISHED_SIZES[variant] <= 0.03


def test_reference_ordering_and_cbam_overhead():
    counts = {v: analytic_param_count(reference_spec(v)) for v in VARIANTS}
    assert sorted(VARIANTS, key=counts.get) == ["unet_dsc", "smaat_unet", "unet", "unet_cbam"]
    assert counts["unet_cbam"] - counts["unet"] == counts["smaat_unet"] - counts["unet_dsc"] == 78347
    assert counts["unet"] == 17280448


def test_built_reference_smaat_unet_matches_formula():
    model = build_model(reference_spec("smaat_unet"))
    assert param_count(model) == analytic_param_count(model.spec)
    assert layer_counts(model) == analytic_layer_counts(model.spec)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("bilinear", [True, False])
def test_built_counts_match_formula(variant, bilinear):
    model = build_model(small_spec(variant, bilinear=bilinear))
    assert param_count(model) == analytic_param_count(model.spec)
    assert sum(n for _, n in layer_counts(model)) == param_count(model)
    assert layer_counts(model) == analytic_layer_counts(model.spec)


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shape(variant, rng):
    model = build_model(small_spec(variant))
    out = forward_model(model, Tensor(rng.standard_normal((2, 5, 16, 16))), training=False)
    assert out.shape == (2, 6, 16, 16)
    assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("variant", VARIANTS)
def test_inference_forward_is_repeatable(variant, rng):
    model = build_model(small_spec(variant))
    x = Tensor(rng.standard_normal((2, 5, 16, 16)))
    first = forward_model(model, x, training=False).data.copy()
    np.testing.assert_array_equal(forward_model(model, x, training=False).data, first)


def test_parameter_names_are_stable():
    names = list(build_model(small_spec("smaat_unet")).parameters)
    assert names[0] == "enc0.conv1.depthwise.weight"
    assert "att2.spatial.bias" in names
    assert "dec0.bn2.beta" in names
    assert names[-2:] == ["out.weight", "out.bias"]
    assert names == list(build_model(small_spec("smaat_unet"), seed=5).parameters)


def test_seeded_build_is_deterministic():
    a = build_model(small_spec("unet_cbam"), seed=3)
    b = build_model(small_spec("unet_cbam"), seed=3)
    c = build_model(small_spec("unet_cbam"), seed=4)
    for name in a.parameters:
        np.testing.assert_array_equal(a.parameters[name].data, b.parameters[name].data)
    assert not np.array_equal(a.parameters["enc0.conv1.weight"].data, c.parameters["enc0.conv1.weight"].data)


def test_forward_rejects_bad_inputs(rng):
    model = build_model(small_spec("unet"))
    with pytest.raises(DimensionError, match="pad"):
        forward_model(model, Tensor(rng.standard_normal((1, 5, 18, 16))))
    with pytest.raises(DimensionError, match="axis 1"):
        forward_model(model, Tensor(rng.standard_normal((1, 4, 16, 16))))


def test_every_parameter_receives_a_gradient(rng):
    model = build_model(small_spec("smaat_unet"))
    x = Tensor(rng.standard_normal((2, 5, 16, 16)))
    loss = mse_loss(forward_model(model, x, training=True), rng.standard_normal((2, 6, 16, 16)))
    backward(loss)
    missing = [name for name, p in model.parameters.items() if p.grad is None]
    assert missing == []
    zero_grad(model)
    assert all(p.grad is None for p in model.parameters.values())


def test_invalid_specs():
    with pytest.raises((ConfigError, ValidationError)):
        ModelSpec(variant="smaat_unet", base_width=8, depth=3, cbam_reduction=16)
    with pytest.raises((ConfigError, ValidationError)):
        ModelSpec(variant="unet", spatial_kernel=7, kernel_size=4)
    with pytest.raises(ValidationError):
        ModelSpec(variant="unet_pp")
    with pytest.raises(ValidationError):
        ModelSpec(variant="unet", depth=1)


def test_decoder_plan_reference_widths():
    plan = reference_spec("unet").decoder_plan()
    assert plan[0] == (3, 1024, 512, 256)
    assert plan[-1] == (0, 128, 64, 64)
    assert reference_spec("unet").encoder_widths() == [64, 128, 256, 512, 512]
