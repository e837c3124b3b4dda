"""
Optimizer, learning-rate schedule and the training loop.

Every optimizer step runs forward -> mse_loss -> backward -> adam_step ->
zero_grad, with the learning rate taken from cosine annealing with warm
restarts (or held constant). The schedule advances once per step and each
restart multiplies the cycle length by t_mult. Unless t0 is given, the first
cycle is sized so that one restart happens and the second cycle ends on the
last step of training.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from checkpoint import Checkpoint, save_checkpoint
from data import BatchLoader, make_windows
from errors import ConfigError, ContractError, NumericError
from models import forward_model, zero_grad
from tensor import Tensor, backward, mse_loss, no_grad

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(10, ge=1)
    lr_max: float = Field(1e-3, gt=0)
    lr_min: float = Field(0.0, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    t0: Optional[int] = Field(None, ge=1)
    t_mult: int = Field(2, ge=1)
    batch_size: int = Field(4, ge=1)
    seed: int = Field(0, ge=0)
    checkpoint_every: int = Field(1, ge=1)
    schedule: Literal["cawrs", "constant"] = "cawrs"
    prefetch: int = Field(2, ge=0)
    progress: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        for beta in self.betas:
            if not 0 <= beta < 1:
                raise ConfigError(f"Adam betas must lie in [0, 1), got {self.betas}")
        return self


@dataclass
class OptState:
    """Adam moments keyed by parameter name plus the schedule position."""
    t_i: int = 1
    t_cur: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t_i < 1:
            raise ConfigError(f"cycle length must be >= 1, got {self.t_i}")


def adam_step(params, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """
    One bias-corrected Adam update of every parameter in `params`.

    Gradients are read, not cleared; the caller resets them.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; run backward() before adam_step()")
    beta1, beta2 = betas
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cawrs_lr(state, lr_max, lr_min=0.0):
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * state.t_cur / state.t_i))


def advance_schedule(state, t_mult=2):
    """Move one step along the schedule; restart when the cycle is used up."""
    state.t_cur += 1
    if state.t_cur >= state.t_i:
        state.t_cur = 0
        state.t_i *= t_mult


def first_cycle(total_steps, t_mult=2):
    """Cycle length t0 such that t0 + t0 * t_mult covers `total_steps`."""
    return max(1, math.ceil(total_steps / (1 + t_mult)))


def batch_starts(order, batch_size):
    """Chunk window starts into batches; a trailing single sample joins the batch before it."""
    order = [int(s) for s in order]
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def _model_dtype(model):
    return next(iter(model.parameters.values())).dtype


def mean_loss(model, ds, windows, layout, batch_size, prefetch=0):
    """Inference-mode MSE over `windows` of `ds`; nan when there are none."""
    if not windows:
        return float("nan")
    dtype = _model_dtype(model)
    total = 0.0
    count = 0
    with no_grad():
        for x, y in BatchLoader(ds, batch_starts(windows, batch_size), layout, prefetch):
            pred = forward_model(model, Tensor(x, dtype=dtype), training=False)
            diff = pred.data.astype(np.float64) - y
            total += float(np.sum(diff * diff))
            count += diff.size
    return total / count


def _check_layout(model, ds, layout):
    expected_in = layout.in_channels(ds.n_dynamic, ds.n_static)
    expected_out = layout.out_channels(ds.n_dynamic)
    spec = model.spec
    if (spec.in_channels, spec.out_channels) != (expected_in, expected_out):
        raise ConfigError(f"model maps {spec.in_channels} -> {spec.out_channels} channels, "
                          f"dataset layout needs {layout.describe(ds.n_dynamic, ds.n_static)}")


def _write_manifest(path, rows):
    lines = ["# epoch train_loss valid_loss final_lr"]
    lines += [f"{e} {tl:.9g} {vl:.9g} {lr:.9g}" for e, tl, vl, lr in rows]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path):
    """[(epoch, train_loss, valid_loss, final_lr)] from a manifest file."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            epoch, train_loss, valid_loss, lr = line.split()
            rows.append((int(epoch), float(train_loss), float(valid_loss), float(lr)))
    return rows


def fit(model, train, valid, config, layout, out_dir):
    """
    Train `model` in place and return the checkpoints written to `out_dir`.

    `valid` may be None or too short for a window; its loss is then nan.
    Raises ConfigError when `train` has no window, NumericError when a loss
    stops being finite.
    """
    _check_layout(model, train, layout)
    windows = make_windows(train, layout.t_in, layout.t_out)
    if not windows:
        raise ConfigError(f"training set has {train.n_frames} frames, too few for "
                          f"t_in={layout.t_in} + t_out={layout.t_out}")
    valid_windows = make_windows(valid, layout.t_in, layout.t_out) if valid is not None else []
    if not valid_windows:
        log.warning("No validation windows; validation loss will be reported as nan")

    steps_per_epoch = len(batch_starts(windows, config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    state = OptState(t_i=config.t0 or first_cycle(total_steps, config.t_mult))
    params = model.parameters
    dtype = _model_dtype(model)
    os.makedirs(out_dir, exist_ok=True)
    log.info("Training %s: %d windows, %d steps/epoch, %d epochs, first cycle %d steps",
             model.spec.variant, len(windows), steps_per_epoch, config.epochs, state.t_i)

    history = []
    rows = []
    checkpoints = []
    lr = config.lr_max
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(windows)
        batches = batch_starts(order, config.batch_size)
        losses = []
        bar = tqdm(total=len(batches), desc=f"epoch {epoch}/{config.epochs}",
                   disable=not config.progress, leave=False)
        for x, y in BatchLoader(train, batches, layout, config.prefetch):
            lr = cawrs_lr(state, config.lr_max, config.lr_min) if config.schedule == "cawrs" else config.lr_max
            pred = forward_model(model, Tensor(x, dtype=dtype), training=True)
            loss = mse_loss(pred, y)
            value = loss.item()
            if not math.isfinite(value):
                bar.close()
                raise NumericError(f"loss became {value} at step {state.step} (epoch {epoch}, lr {lr:.3g})",
                                   step=state.step, lr=lr, history=history[-20:])
            backward(loss)
            adam_step(params, state, lr, config.betas, config.eps)
            zero_grad(model)
            advance_schedule(state, config.t_mult)
            history.append(value)
            losses.append(value)
            bar.update(1)
            bar.set_postfix(loss=f"{value:.4f}", lr=f"{lr:.2e}")
        bar.close()

        train_loss = float(np.mean(losses))
        valid_loss = mean_loss(model, valid, valid_windows, layout, config.batch_size)
        rows.append((epoch, train_loss, valid_loss, lr))
        _write_manifest(os.path.join(out_dir, MANIFEST), rows)
        log.info("epoch %d/%d  train %.5f  valid %.5f  lr %.3e", epoch, config.epochs, train_loss, valid_loss, lr)

        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            path = os.path.join(out_dir, f"epoch_{epoch:02d}.smck")
            summary = {
                "epoch": epoch,
                "step": state.step,
                "train_loss": train_loss,
                "valid_loss": valid_loss,
                "layout": layout.model_dump(mode="json"),
                "train": config.model_dump(mode="json"),
                "channel_names": train.channel_names,
            }
            save_checkpoint(path, model, summary)
            checkpoints.append(Checkpoint(path, epoch, state.step, train_loss, valid_loss))
            log.info("Saved %s", path)
    return checkpoints
