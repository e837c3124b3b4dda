"""
Tensor core: dense float arrays with reverse-mode gradients.

Provides:
- Tensor: up to 4-D values (batch, channel, height, width) with a grad slot
- Graph / backward(): reverse replay of the recorded operations
- conv2d, maxpool2, upsample_bilinear2, batch_norm, activation,
  reduce_spatial, reduce_channel, linear, concat_channels, split_channels,
  reshape, elementwise, mse_loss
- set_default_dtype / set_num_threads / no_grad

Every op is a plain function. It computes the forward value with numpy and,
when any input requires a gradient, attaches a Node whose closure maps the
output gradient back onto the inputs.
"""
import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigError, ContractError, DegenerateStatisticsError, DimensionError

DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = np.float32
_num_threads = 1
_state = threading.local()
_sequence = itertools.count()


def set_default_dtype(name):
    """Select the dtype new tensors are created with ("f32" or "f64")."""
    global _default_dtype
    if name not in DTYPES:
        raise ConfigError(f"unknown dtype {name!r}, expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


def get_default_dtype():
    return _default_dtype


def set_num_threads(n):
    """Worker count used inside conv2d. n=1 keeps every op single-threaded."""
    global _num_threads
    if int(n) < 1:
        raise ConfigError(f"threads must be >= 1, got {n}")
    _num_threads = int(n)


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording a graph (inference, evaluation)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@dataclass(eq=False)
class Node:
    seq: int
    op: str
    inputs: tuple
    backward_fn: object


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise DimensionError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _from_op(cls, data, op, inputs, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._node = None
        out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            out._node = Node(next(_sequence), op, tuple(inputs), backward_fn)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __add__(self, other):
        return elementwise(self, _as_tensor(other, self), "add")

    def __mul__(self, other):
        return elementwise(self, _as_tensor(other, self), "mul")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


class Graph:
    """Operations reachable from one output, kept in execution order."""

    def __init__(self, outputs):
        self.outputs = outputs

    @classmethod
    def trace(cls, output):
        seen = set()
        found = []
        stack = [output]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def backward(self, output, grad):
        grads = {id(output): grad}
        for t in reversed(self.outputs):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi


def backward(output, grad=None):
    """
    Accumulate d(output)/d(leaf) into every requires_grad leaf.

    Without `grad` the output must hold a single element. Calling twice without
    clearing grads adds the second pass on top of the first.
    """
    if grad is None:
        if output.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {output.shape}")
        grad = np.ones_like(output.data)
    else:
        grad = np.asarray(grad, dtype=output.dtype)
        if grad.shape != output.shape:
            raise DimensionError(f"output gradient shape {grad.shape} != output shape {output.shape}")
    if not output.requires_grad:
        raise ContractError("backward() on a tensor that does not require grad")
    if output._node is None:
        output.grad = grad.copy() if output.grad is None else output.grad + grad
        return
    Graph.trace(output).backward(output, grad)


# -------------------
# Shape helpers
# -------------------
_AXES = ("batch", "channel", "height", "width")


def _expect_4d(t, name):
    if t.ndim != 4:
        raise DimensionError(f"{name} must be (batch, channel, height, width), got shape {t.shape}")


def _unbroadcast(grad, shape):
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _batch_chunks(batch):
    n = min(_num_threads, batch)
    if n <= 1:
        return [slice(0, batch)]
    bounds = np.linspace(0, batch, n + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _run_chunks(fn, chunks):
    if len(chunks) == 1:
        return [fn(chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(fn, chunks))


# -------------------
# Convolution
# -------------------
def _windows(xp, k, stride):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(xp, w, stride, groups):
    B = xp.shape[0]
    O, Cg, k, _ = w.shape
    win = _windows(xp, k, stride)
    Ho, Wo = win.shape[2:4]
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    win = win.reshape(B, groups, Cg, Ho, Wo, k, k)
    wg = w.reshape(groups, O // groups, Cg, k, k)
    out = np.einsum("bgchwij,gocij->bgohw", win, wg, optimize=True)
    return out.reshape(B, O, Ho, Wo)


def _conv_backward(gout, xp, w, stride, groups):
    B, C = xp.shape[:2]
    O, Cg, k, _ = w.shape
    Ho, Wo = gout.shape[2:]
    win = _windows(xp, k, stride)
    gxp = np.zeros_like(xp)
    if groups == 1:
        gw = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))
    else:
        gout_g = gout.reshape(B, groups, O // groups, Ho, Wo)
        win_g = win.reshape(B, groups, Cg, Ho, Wo, k, k)
        wg = w.reshape(groups, O // groups, Cg, k, k)
        gw = np.einsum("bgohw,bgchwij->gocij", gout_g, win_g, optimize=True).reshape(w.shape)
    h_end = stride * (Ho - 1) + 1
    w_end = stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            if groups == 1:
                contrib = np.tensordot(gout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            else:
                contrib = np.einsum("bgohw,goc->bgchw", gout_g, wg[..., i, j]).reshape(B, C, Ho, Wo)
            gxp[:, :, i:i + h_end:stride, j:j + w_end:stride] += contrib
    return gxp, gw


def conv2d(input, weight, bias=None, stride=1, padding=0, groups=1):
    """
    Grouped 2-D convolution with zero padding.

    groups=1 is a regular convolution, groups=Cin a depthwise one. Output
    extent per spatial axis is (n + 2*padding - k) // stride + 1.
    """
    _expect_4d(input, "input")
    _expect_4d(weight, "weight")
    B, Cin, H, W = input.shape
    Cout, Cg, kh, kw = weight.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise ConfigError(f"groups={groups} must divide input channels {Cin} and output channels {Cout}")
    if Cg != Cin // groups:
        raise DimensionError(f"weight axis 1 (channel) has {Cg}, expected Cin/groups = {Cin // groups}")
    if kh != kw:
        raise DimensionError(f"weight axes 2/3 (kernel) must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {kh}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"need stride >= 1 and padding >= 0, got stride={stride} padding={padding}")
    if bias is not None and bias.shape != (Cout,):
        raise DimensionError(f"bias axis 0 (channel) has shape {bias.shape}, expected ({Cout},)")
    for axis, n in ((2, H), (3, W)):
        if n + 2 * padding < kh:
            raise DimensionError(f"input axis {axis} ({_AXES[axis]}) of size {n} is smaller than kernel {kh}")

    x = input.data
    w = weight.data
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    chunks = _batch_chunks(B)
    parts = _run_chunks(lambda s: _conv_forward(xp[s], w, stride, groups), chunks)
    out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = out.astype(x.dtype, copy=False)

    def _backward(g):
        results = _run_chunks(lambda s: _conv_backward(g[s], xp[s], w, stride, groups), chunks)
        gxp = np.concatenate([r[0] for r in results], axis=0) if len(results) > 1 else results[0][0]
        gw = results[0][1]
        for r in results[1:]:
            gw = gw + r[1]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return Tensor._from_op(out, "conv2d", inputs, _backward)


# -------------------
# Resampling
# -------------------
def maxpool2(input):
    """2x2 max pool, stride 2. Gradient goes to the first maximum in scan order."""
    _expect_4d(input, "input")
    B, C, H, W = input.shape
    if H % 2:
        raise DimensionError(f"maxpool2 needs an even axis 2 (height), got {H}")
    if W % 2:
        raise DimensionError(f"maxpool2 needs an even axis 3 (width), got {W}")
    win = input.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), "maxpool2", (input,), _backward)


@lru_cache(maxsize=64)
def _interp_matrix(n, dtype_name):
    """(2n, n) bilinear weights for x2 upsampling, align_corners=False."""
    dst = np.arange(2 * n)
    src = np.maximum((dst + 0.5) / 2.0 - 0.5, 0.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n))
    np.add.at(m, (dst, lo), 1.0 - frac)
    np.add.at(m, (dst, hi), frac)
    return m.astype(dtype_name)


def upsample_bilinear2(input):
    """x2 bilinear upsampling (align_corners=False)."""
    _expect_4d(input, "input")
    B, C, H, W = input.shape
    if H < 1 or W < 1:
        raise DimensionError(f"upsample needs non-empty spatial axes, got {H}x{W}")
    mh = _interp_matrix(H, input.dtype.name)
    mw = _interp_matrix(W, input.dtype.name)
    out = np.matmul(np.matmul(mh, input.data), mw.T)

    def _backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return Tensor._from_op(out, "upsample_bilinear2", (input,), _backward)


# -------------------
# Normalization and activations
# -------------------
@dataclass
class BatchNormState:
    """Per-channel running statistics; arrays are updated in place."""

    running_mean: np.ndarray
    running_var: np.ndarray


def batch_norm(input, gamma, beta, state, training, eps=1e-5, momentum=0.1):
    _expect_4d(input, "input")
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be > 0, got {eps}")
    B, C, H, W = input.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"gamma/beta axis 0 (channel) must be ({C},), got {gamma.shape} / {beta.shape}")
    x = input.data
    axes = (0, 2, 3)
    n = B * H * W
    if training:
        if n < 2:
            raise DegenerateStatisticsError(
                f"batch_norm in training mode needs >= 2 values per channel, got {n} (shape {input.shape})")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var * (n / (n - 1))
    else:
        mean = state.running_mean
        var = state.running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def _backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv[None, :, None, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor._from_op(out, "batch_norm", (input, gamma, beta), _backward)


def relu(input):
    x = input.data
    out = np.maximum(x, 0)

    def _backward(g):
        return (g * (x > 0),)

    return Tensor._from_op(out, "relu", (input,), _backward)


def sigmoid(input):
    x = input.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    # gates stay strictly inside (0, 1) even when saturated
    out = np.clip(out, np.nextafter(x.dtype.type(0), x.dtype.type(1)), np.nextafter(x.dtype.type(1), x.dtype.type(0)))

    def _backward(g):
        return (g * out * (1 - out),)

    return Tensor._from_op(out, "sigmoid", (input,), _backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


def activation(input, kind):
    if kind not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}, expected relu or sigmoid")
    return _ACTIVATIONS[kind](input)


# -------------------
# Reductions
# -------------------
def _reduce(input, axis, kind, op):
    _expect_4d(input, "input")
    if kind not in ("avg", "max"):
        raise ConfigError(f"unknown reduction {kind!r}, expected avg or max")
    x = input.data
    if kind == "avg":
        if axis == 1:
            count = x.shape[1]
            out = x.mean(axis=1, keepdims=True)
        else:
            count = x.shape[2] * x.shape[3]
            out = x.mean(axis=(2, 3), keepdims=True)

        def _backward(g):
            return (np.broadcast_to(g / count, x.shape).copy(),)

        return Tensor._from_op(out, op, (input,), _backward)

    if axis == 1:
        idx = x.argmax(axis=1)[:, None]
        out = np.take_along_axis(x, idx, axis=1)

        def _backward(g):
            gx = np.zeros_like(x)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        return Tensor._from_op(out, op, (input,), _backward)

    B, C, H, W = x.shape
    flat = x.reshape(B, C, H * W)
    idx = flat.argmax(axis=2)[..., None]
    out = np.take_along_axis(flat, idx, axis=2).reshape(B, C, 1, 1)

    def _backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx, g.reshape(B, C, 1), axis=2)
        return (gx.reshape(B, C, H, W),)

    return Tensor._from_op(out, op, (input,), _backward)


def reduce_spatial(input, kind):
    """Pool each channel over H, W -> (B, C, 1, 1)."""
    return _reduce(input, (2, 3), kind, f"reduce_spatial_{kind}")


def reduce_channel(input, kind):
    """Pool across channels at each pixel -> (B, 1, H, W)."""
    return _reduce(input, 1, kind, f"reduce_channel_{kind}")


# -------------------
# Dense and structural ops
# -------------------
def linear(input, weight, bias=None):
    if input.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects (B,N) input and (M,N) weight, got {input.shape} and {weight.shape}")
    if input.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear inner axis mismatch: input has {input.shape[1]}, weight has {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias axis 0 has shape {bias.shape}, expected ({weight.shape[0]},)")
    x = input.data
    w = weight.data
    out = x @ w.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        return g @ w, g.T @ x, (g.sum(axis=0) if bias is not None else None)

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return Tensor._from_op(out, "linear", inputs, _backward)


def reshape(input, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != input.size:
        raise DimensionError(f"cannot reshape {input.shape} into {shape}")
    original = input.shape
    out = input.data.reshape(shape)

    def _backward(g):
        return (g.reshape(original),)

    return Tensor._from_op(out, "reshape", (input,), _backward)


def concat_channels(a, b):
    _expect_4d(a, "a")
    _expect_4d(b, "b")
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"concat_channels axis {axis} ({_AXES[axis]}) differs: {a.shape[axis]} vs {b.shape[axis]}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def _backward(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(out, "concat_channels", (a, b), _backward)


def split_channels(input, ca):
    """Inverse of concat_channels: channels [0, ca) and [ca, C)."""
    _expect_4d(input, "input")
    C = input.shape[1]
    if not 0 <= ca <= C:
        raise DimensionError(f"split point {ca} outside axis 1 (channel) of size {C}")
    x = input.data

    def _first(g):
        full = np.zeros_like(x)
        full[:, :ca] = g
        return (full,)

    def _second(g):
        full = np.zeros_like(x)
        full[:, ca:] = g
        return (full,)

    a = Tensor._from_op(np.ascontiguousarray(x[:, :ca]), "split_channels", (input,), _first)
    b = Tensor._from_op(np.ascontiguousarray(x[:, ca:]), "split_channels", (input,), _second)
    return a, b


def elementwise(a, b, kind):
    """add | mul, with b expanded to a's shape along singleton axes."""
    if kind not in ("add", "mul"):
        raise ConfigError(f"unknown elementwise kind {kind!r}, expected add or mul")
    if a.shape != b.shape:
        if a.ndim != b.ndim:
            raise DimensionError(f"cannot broadcast shape {b.shape} to {a.shape}: different number of axes")
        for axis, (na, nb) in enumerate(zip(a.shape, b.shape)):
            if nb not in (1, na):
                raise DimensionError(f"cannot broadcast axis {axis}: {nb} to {na} (shapes {b.shape} -> {a.shape})")
    x = a.data
    y = b.data
    if kind == "add":
        out = x + y

        def _backward(g):
            return g, _unbroadcast(g, y.shape)
    else:
        out = x * y

        def _backward(g):
            return g * y, _unbroadcast(g * x, y.shape)

    return Tensor._from_op(out, kind, (a, b), _backward)

def mse_loss(pred, target):
    """Mean of squared differences, returned as a one-element tensor."""
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.array([np.mean(diff * diff)], dtype=pred.dtype)

    def _backward(g):
        gp = (2.0 / n) * g[0] * diff
        return gp.astype(pred.dtype, copy=False), -gp.astype(pred.dtype, copy=False)

    return Tensor._from_op(out, "mse_loss", (pred, target), _backward)
