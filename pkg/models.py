"""
Model zoo: the four U-Net variants and their parameter accounting.

    variant      convolutions   CBAM on encoder outputs
    unet         regular        no
    unet_dsc     separable      no
    unet_cbam    regular        yes
    smaat_unet   separable      yes

Parameter names are stable across runs and double as checkpoint keys:
enc{i}.* (encoder level i, the last one is the bottleneck), att{i}.* (CBAM on
enc{i}), dec{i}.* (decoder level producing the resolution of enc{i}), out.*.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from blocks import cbam, check_reduction, check_spatial_kernel, double_conv, init_cbam, init_double_conv, init_head
from errors import ConfigError, DimensionError
from tensor import concat_channels, conv2d, get_default_dtype, maxpool2, upsample_bilinear2

log = logging.getLogger(__name__)

VARIANTS = ("unet", "unet_dsc", "unet_cbam", "smaat_unet")

# Reference i/o for the parameter audit: 4 frames x 4 products + 3 statics in,
# 32 leads x 4 products out.
REFERENCE_IN_CHANNELS = 19
REFERENCE_OUT_CHANNELS = 128


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    variant: Literal["unet", "unet_dsc", "unet_cbam", "smaat_unet"] = "smaat_unet"
    in_channels: int = Field(REFERENCE_IN_CHANNELS, ge=1)
    out_channels: int = Field(REFERENCE_OUT_CHANNELS, ge=1)
    base_width: int = Field(64, ge=1)
    depth: int = Field(5, ge=2)
    cbam_reduction: int = Field(16, ge=1)
    spatial_kernel: int = Field(7, ge=1)
    bilinear: bool = True
    kernel_size: int = Field(3, ge=1)
    kernels_per_layer: int = Field(2, ge=1)
    bn_eps: float = Field(1e-5, gt=0)
    bn_momentum: float = Field(0.1, gt=0, le=1)

    @property
    def separable(self):
        return self.variant in ("unet_dsc", "smaat_unet")

    @property
    def attention(self):
        return self.variant in ("unet_cbam", "smaat_unet")

    @property
    def factor(self):
        return 2 if self.bilinear else 1

    @model_validator(mode="after")
    def _check_widths(self):
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        top = self.base_width * 2 ** (self.depth - 1)
        if top % self.factor:
            raise ConfigError(f"bottleneck width {top} cannot be halved for the bilinear decoder")
        if self.attention:
            check_spatial_kernel(self.spatial_kernel)
            for width in self.encoder_widths():
                check_reduction(width, self.cbam_reduction)
        return self

    def encoder_widths(self):
        widths = [self.base_width * 2 ** i for i in range(self.depth)]
        widths[-1] //= self.factor
        return widths

    def decoder_plan(self):
        """[(level, in_channels, mid_channels, out_channels)] from deepest to shallowest."""
        enc = self.encoder_widths()
        plan = []
        below = enc[-1]
        for level in reversed(range(self.depth - 1)):
            cin = below + enc[level]
            if level == 0:
                cout = self.base_width
            else:
                cout = self.base_width * 2 ** level // self.factor
            mid = cin // 2 if self.bilinear else cout
            plan.append((level, cin, mid, cout))
            below = cout
        return plan


@dataclass
class Model:
    spec: ModelSpec
    parameters: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)


def build_model(spec, seed=0, dtype=None):
    """Instantiate `spec` with seed-deterministic Kaiming-uniform weights."""
    dtype = dtype or get_default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    buffers = {}
    k = spec.kernel_size
    kpl = spec.kernels_per_layer
    cin = spec.in_channels
    for level, width in enumerate(spec.encoder_widths()):
        init_double_conv(params, buffers, f"enc{level}", cin, width, width, spec.separable, k, kpl, rng, dtype)
        if spec.attention:
            init_cbam(params, f"att{level}", width, spec.cbam_reduction, spec.spatial_kernel, rng, dtype)
        cin = width
    for level, dec_in, mid, dec_out in spec.decoder_plan():
        init_double_conv(params, buffers, f"dec{level}", dec_in, dec_out, mid, spec.separable, k, kpl, rng, dtype)
    init_head(params, "out", spec.base_width, spec.out_channels, rng, dtype)
    model = Model(spec, params, buffers)
    log.debug("Built %s with %d parameters", spec.variant, param_count(model))
    return model


def forward_model(model, batch, training=False):
    """Map (B, Cin, H, W) to (B, Cout, H, W); all lead times come out as channels."""
    spec = model.spec
    params = model.parameters
    buffers = model.buffers
    if batch.ndim != 4:
        raise DimensionError(f"batch must be (batch, channel, height, width), got shape {batch.shape}")
    B, C, H, W = batch.shape
    if C != spec.in_channels:
        raise DimensionError(f"batch axis 1 (channel) has {C}, model expects {spec.in_channels}")
    multiple = 2 ** (spec.depth - 1)
    for axis, n in ((2, H), (3, W)):
        if n % multiple:
            raise DimensionError(
                f"batch axis {axis} has size {n}, not divisible by {multiple}; pad frames to a multiple of {multiple}")

    norm = dict(eps=spec.bn_eps, momentum=spec.bn_momentum)
    skips = []
    x = batch
    for level in range(spec.depth):
        if level:
            x = maxpool2(x)
        x = double_conv(x, params, buffers, f"enc{level}", spec.separable, training, **norm)
        if spec.attention:
            x = cbam(x, params, f"att{level}", spec.cbam_reduction, spec.spatial_kernel)
        skips.append(x)
    x = skips.pop()
    for level, _, _, _ in spec.decoder_plan():
        x = concat_channels(skips[level], upsample_bilinear2(x))
        x = double_conv(x, params, buffers, f"dec{level}", spec.separable, training, **norm)
    return conv2d(x, params["out.weight"], params["out.bias"])


def param_count(model):
    """Trainable elements; running statistics are not counted."""
    return int(sum(p.size for p in model.parameters.values()))


def layer_counts(model):
    """[(block, count)] in build order, summing to param_count(model)."""
    counts = {}
    for name, p in model.parameters.items():
        block = name.split(".", 1)[0]
        counts[block] = counts.get(block, 0) + p.size
    return list(counts.items())


def zero_grad(model):
    for p in model.parameters.values():
        p.grad = None


# -------------------
# Closed-form accounting
# -------------------
def _conv_count(cin, cout, k, separable, kpl):
    if separable:
        return cin * kpl * k * k + cin * kpl * cout
    return cin * cout * k * k


def _double_conv_count(cin, mid, cout, spec):
    k = spec.kernel_size
    kpl = spec.kernels_per_layer
    convs = _conv_count(cin, mid, k, spec.separable, kpl) + _conv_count(mid, cout, k, spec.separable, kpl)
    return convs + 2 * mid + 2 * cout


def _cbam_count(channels, spec):
    hidden = channels // spec.cbam_reduction
    mlp = channels * hidden + hidden + hidden * channels + channels
    return mlp + 2 * spec.spatial_kernel ** 2 + 1


def analytic_layer_counts(spec):
    """Per-block counts from the layer formulas alone, without building tensors."""
    counts = []
    cin = spec.in_channels
    for level, width in enumerate(spec.encoder_widths()):
        counts.append((f"enc{level}", _double_conv_count(cin, width, width, spec)))
        if spec.attention:
            counts.append((f"att{level}", _cbam_count(width, spec)))
        cin = width
    for level, dec_in, mid, dec_out in spec.decoder_plan():
        counts.append((f"dec{level}", _double_conv_count(dec_in, mid, dec_out, spec)))
    counts.append(("out", spec.base_width * spec.out_channels + spec.out_channels))
    return counts


def analytic_param_count(spec):
    return sum(n for _, n in analytic_layer_counts(spec))


def reference_spec(variant, **overrides):
    """Spec used for the parameter audit (in=19, out=128, base=64, depth=5)."""
    return ModelSpec(variant=variant, **overrides)
