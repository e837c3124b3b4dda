"""
Central finite-difference checks for the tensor ops.

Run in 64-bit mode: the default step h=1e-5 is too small for float32.
"""
import numpy as np

from tensor import backward

DEFAULT_STEP = 1e-5


def numerical_gradient(fn, inputs, index, weights, h=DEFAULT_STEP):
    """d sum(fn(*inputs) * weights) / d inputs[index], by central differences."""
    target = inputs[index].data
    grad = np.zeros_like(target, dtype=np.float64)
    flat = target.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float(np.sum(fn(*inputs).data * weights))
        flat[i] = original - h
        minus = float(np.sum(fn(*inputs).data * weights))
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def analytic_gradients(fn, inputs, weights):
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    backward(out, weights)
    return [t.grad for t in inputs]


def relative_error(analytic, numeric, floor=1e-2):
    """
    Largest |a - n| / max(|a| + |n|, floor) over all elements.

    Below `floor` the comparison is absolute: central differences with h=1e-5
    carry about 1e-9 of rounding and truncation error, so a gradient near zero
    would otherwise read as a relative error of order one. With the default
    floor an element whose |a| + |n| is under 1e-2 passes a 1e-4 tolerance only
    when |a - n| < 1e-6.
    """
    if analytic is None:
        analytic = np.zeros_like(numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0


def max_relative_error(fn, inputs, seed=0, h=DEFAULT_STEP):
    """
    Compare backward() against finite differences for every input that
    requires grad. The output is projected to a scalar with seeded weights so
    that every output element contributes.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape).astype(out.dtype)
    grads = analytic_gradients(fn, inputs, weights)
    worst = 0.0
    for index, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        numeric = numerical_gradient(fn, inputs, index, weights, h)
        worst = max(worst, relative_error(grads[index], numeric))
    return worst
