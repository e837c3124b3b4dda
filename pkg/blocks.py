"""
Building blocks shared by the U-Net variants.

Provides init_* functions that register parameters under dotted names, and
the matching forward functions:
- dsc: depthwise (groups=Cin) then pointwise 1x1 convolution, bias-free
- double_conv: (conv -> batch_norm -> relu) x 2, regular or separable
- channel_attention / spatial_attention / cbam

Parameters live in a plain dict name -> Tensor; running statistics in a dict
name -> ndarray. Insertion order is the serialization order.
"""
import math

import numpy as np

from errors import ConfigError
from tensor import (
    BatchNormState,
    Tensor,
    activation,
    batch_norm,
    concat_channels,
    conv2d,
    elementwise,
    linear,
    reduce_channel,
    reduce_spatial,
    reshape,
)


# -------------------
# Initialization
# -------------------
def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def bias_uniform(rng, size, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=size), requires_grad=True, dtype=dtype)


def init_conv(params, name, cin, cout, k, rng, dtype, groups=1, bias=False):
    fan_in = (cin // groups) * k * k
    params[f"{name}.weight"] = kaiming_uniform(rng, (cout, cin // groups, k, k), fan_in, dtype)
    if bias:
        params[f"{name}.bias"] = bias_uniform(rng, cout, fan_in, dtype)


def init_head(params, name, cin, cout, rng, dtype):
    """1x1 output conv with bias; weights within +-1/sqrt(cin) rather than the Kaiming bound."""
    bound = 1.0 / math.sqrt(cin)
    params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, size=(cout, cin, 1, 1)), requires_grad=True, dtype=dtype)
    params[f"{name}.bias"] = bias_uniform(rng, cout, cin, dtype)


def init_dsc(params, name, cin, cout, k, kernels_per_layer, rng, dtype):
    init_conv(params, f"{name}.depthwise", cin, cin * kernels_per_layer, k, rng, dtype, groups=cin)
    init_conv(params, f"{name}.pointwise", cin * kernels_per_layer, cout, 1, rng, dtype)


def init_batch_norm(params, buffers, name, channels, dtype):
    params[f"{name}.gamma"] = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
    params[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
    buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=dtype)
    buffers[f"{name}.running_var"] = np.ones(channels, dtype=dtype)


def init_double_conv(params, buffers, name, cin, cout, mid, separable, k, kernels_per_layer, rng, dtype):
    for stage, (a, b) in enumerate(((cin, mid), (mid, cout)), start=1):
        if separable:
            init_dsc(params, f"{name}.conv{stage}", a, b, k, kernels_per_layer, rng, dtype)
        else:
            init_conv(params, f"{name}.conv{stage}", a, b, k, rng, dtype)
        init_batch_norm(params, buffers, f"{name}.bn{stage}", b, dtype)


def init_cbam(params, name, channels, reduction, spatial_kernel, rng, dtype):
    check_reduction(channels, reduction)
    hidden = channels // reduction
    params[f"{name}.channel.fc1.weight"] = kaiming_uniform(rng, (hidden, channels), channels, dtype)
    params[f"{name}.channel.fc1.bias"] = bias_uniform(rng, hidden, channels, dtype)
    params[f"{name}.channel.fc2.weight"] = kaiming_uniform(rng, (channels, hidden), hidden, dtype)
    params[f"{name}.channel.fc2.bias"] = bias_uniform(rng, channels, hidden, dtype)
    check_spatial_kernel(spatial_kernel)
    init_conv(params, f"{name}.spatial", 2, 1, spatial_kernel, rng, dtype, bias=True)


def check_reduction(channels, reduction):
    if reduction < 1 or channels % reduction:
        raise ConfigError(f"CBAM reduction {reduction} must divide the gated width {channels}")


def check_spatial_kernel(k):
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"spatial attention kernel must be odd, got {k}")


# -------------------
# Forward
# -------------------
def dsc(x, params, name):
    """pointwise(depthwise(x)). The depth multiplier is read off the weights."""
    depthwise = params[f"{name}.depthwise.weight"]
    k = depthwise.shape[-1]
    x = conv2d(x, depthwise, stride=1, padding=k // 2, groups=x.shape[1])
    return conv2d(x, params[f"{name}.pointwise.weight"])


def double_conv(x, params, buffers, name, separable, training, eps=1e-5, momentum=0.1):
    for stage in (1, 2):
        conv = f"{name}.conv{stage}"
        if separable:
            x = dsc(x, params, conv)
        else:
            weight = params[f"{conv}.weight"]
            x = conv2d(x, weight, padding=weight.shape[-1] // 2)
        bn = f"{name}.bn{stage}"
        state = BatchNormState(buffers[f"{bn}.running_mean"], buffers[f"{bn}.running_var"])
        x = batch_norm(x, params[f"{bn}.gamma"], params[f"{bn}.beta"], state, training, eps, momentum)
        x = activation(x, "relu")
    return x


def _shared_mlp(v, params, name):
    h = linear(v, params[f"{name}.fc1.weight"], params[f"{name}.fc1.bias"])
    h = activation(h, "relu")
    return linear(h, params[f"{name}.fc2.weight"], params[f"{name}.fc2.bias"])


def channel_attention(F, params, name, reduction):
    """sigmoid(mlp(avgpool F) + mlp(maxpool F)) -> (B, C, 1, 1)."""
    B, C = F.shape[:2]
    check_reduction(C, reduction)
    name = f"{name}.channel"
    avg = reshape(reduce_spatial(F, "avg"), (B, C))
    peak = reshape(reduce_spatial(F, "max"), (B, C))
    logits = elementwise(_shared_mlp(avg, params, name), _shared_mlp(peak, params, name), "add")
    return activation(reshape(logits, (B, C, 1, 1)), "sigmoid")


def spatial_attention(F, params, name, kernel):
    """sigmoid(conv_kxk([mean_c F, max_c F])) -> (B, 1, H, W)."""
    check_spatial_kernel(kernel)
    pooled = concat_channels(reduce_channel(F, "avg"), reduce_channel(F, "max"))
    weight = params[f"{name}.spatial.weight"]
    if weight.shape[-1] != kernel:
        raise ConfigError(f"spatial attention weights are {weight.shape[-1]}x{weight.shape[-1]}, spec says {kernel}")
    logits = conv2d(pooled, weight, params[f"{name}.spatial.bias"], padding=kernel // 2)
    return activation(logits, "sigmoid")


def cbam(F, params, name, reduction, spatial_kernel):
    refined = elementwise(F, channel_attention(F, params, name, reduction), "mul")
    return elementwise(refined, spatial_attention(refined, params, name, spatial_kernel), "mul")
