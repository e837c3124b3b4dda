"""
Data: STWF frame files, sliding-window samples and the synthetic generator.

A dataset is a time-ordered stack of dynamic frames (T, C_dyn, H, W) plus
time-invariant static channels (C_static, H, W). A sample stacks t_in input
frames along the channel axis and asks for t_out future frames of the target
channels, also stacked along channels:

    input  (layout "once"):      [f0 c0..cD, f1 c0..cD, ..., static s0..sS]
    input  (layout "per_frame"): [f0 c0..cD s0..sS, f1 c0..cD s0..sS, ...]
    target:                      [lead1 targets, lead2 targets, ...]

Dynamic channels are standardized with the dataset stats; statics are min-max
scaled to [0, 1] per channel.
"""
import logging
import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import gaussian_filter

from binio import ByteReader, pack_floats, pack_string, read_file
from errors import ConfigError, DataError, DimensionError, FormatError
from tensor import Tensor

log = logging.getLogger(__name__)

STWF_MAGIC = b"STWF"
STWF_VERSION = 1
STD_FLOOR = 1e-6
DEFAULT_CADENCE = 15

SYNTH_DYNAMIC = ("intensity", "rain", "smooth", "cloud_mask")
SYNTH_STATIC = ("row", "column", "elevation")
SYNTH_THRESHOLD = 0.5


@dataclass
class FrameDataset:
    dynamic: np.ndarray
    static: np.ndarray
    channel_names: list
    mean: np.ndarray
    std: np.ndarray
    cadence_minutes: int = DEFAULT_CADENCE
    _static_scaled: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.dynamic = np.asarray(self.dynamic, dtype=np.float32)
        self.static = np.asarray(self.static, dtype=np.float32)
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float32).reshape(-1)
        self.channel_names = list(self.channel_names)
        if self.dynamic.ndim != 4:
            raise DataError(f"dynamic frames must be (T, C, H, W), got shape {self.dynamic.shape}")
        if self.static.ndim != 3:
            raise DataError(f"static channels must be (C, H, W), got shape {self.static.shape}")
        if self.dynamic.shape[2:] != self.static.shape[1:]:
            raise DataError(f"dynamic frames are {self.dynamic.shape[2:]}, statics are {self.static.shape[1:]}")
        if len(self.channel_names) != self.n_dynamic + self.n_static:
            raise DataError(f"{len(self.channel_names)} channel names for "
                            f"{self.n_dynamic} dynamic + {self.n_static} static channels")
        if self.mean.shape != (self.n_dynamic,) or self.std.shape != (self.n_dynamic,):
            raise DataError(f"need one mean/std per dynamic channel ({self.n_dynamic})")
        if not np.all(self.std > 0):
            raise DataError(f"normalization std must be positive, got {self.std.tolist()}")

    @property
    def n_frames(self):
        return self.dynamic.shape[0]

    @property
    def n_dynamic(self):
        return self.dynamic.shape[1]

    @property
    def n_static(self):
        return self.static.shape[0]

    @property
    def height(self):
        return self.static.shape[1]

    @property
    def width(self):
        return self.static.shape[2]

    @property
    def dynamic_names(self):
        return self.channel_names[:self.n_dynamic]

    @property
    def static_names(self):
        return self.channel_names[self.n_dynamic:]

    def static_scaled(self):
        """Statics min-max scaled to [0, 1]; constant channels become 0."""
        if self._static_scaled is None:
            lo = self.static.min(axis=(1, 2), keepdims=True) if self.n_static else self.static
            hi = self.static.max(axis=(1, 2), keepdims=True) if self.n_static else self.static
            span = hi - lo
            safe = np.where(span > 0, span, 1).astype(np.float32)
            self._static_scaled = np.where(span > 0, (self.static - lo) / safe, 0).astype(np.float32)
        return self._static_scaled


class SampleLayout(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    t_in: int = Field(4, ge=1)
    t_out: int = Field(32, ge=1)
    target_channels: Optional[tuple[int, ...]] = None
    static_layout: Literal["once", "per_frame"] = "once"

    def targets(self, c_dyn):
        if self.target_channels is None:
            return list(range(c_dyn))
        chosen = list(self.target_channels)
        if not chosen:
            raise ConfigError("target_channels must name at least one channel")
        for c in chosen:
            if not 0 <= c < c_dyn:
                raise ConfigError(f"target channel {c} outside the {c_dyn} dynamic channels")
        return chosen

    def in_channels(self, c_dyn, c_static):
        if self.static_layout == "once":
            return self.t_in * c_dyn + c_static
        return self.t_in * (c_dyn + c_static)

    def out_channels(self, c_dyn):
        return self.t_out * len(self.targets(c_dyn))

    def describe(self, c_dyn, c_static):
        return (f"t_in={self.t_in} t_out={self.t_out} static_layout={self.static_layout} "
                f"in={self.in_channels(c_dyn, c_static)} out={self.out_channels(c_dyn)}")


@dataclass
class Sample:
    input: Tensor
    target: Tensor
    start: int


# -------------------
# STWF files
# -------------------
def write_dataset(ds, path):
    T, C_dyn, H, W = ds.dynamic.shape
    parts = [STWF_MAGIC, struct.pack("<H5IH", STWF_VERSION, T, C_dyn, ds.n_static, H, W, ds.cadence_minutes)]
    parts.append(struct.pack("<H", len(ds.channel_names)))
    parts.extend(pack_string(name) for name in ds.channel_names)
    parts.append(pack_floats(np.stack([ds.mean, ds.std], axis=1)))
    parts.append(pack_floats(ds.dynamic))
    parts.append(pack_floats(ds.static))
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    log.debug("Wrote %s (%d frames, %dx%d)", path, T, H, W)
    return path


def read_dataset(path):
    raw = read_file(path, "dataset")
    reader = ByteReader(raw, path)
    if reader.take(4, "magic") != STWF_MAGIC:
        raise FormatError(f"{path}: not an STWF dataset (bad magic)")
    (version,) = reader.unpack("<H", "version")
    if version != STWF_VERSION:
        raise FormatError(f"{path}: unsupported STWF version {version}")
    T, C_dyn, C_static, H, W, cadence = reader.unpack("<5IH", "header")
    (n_names,) = reader.unpack("<H", "name count")
    names = [reader.string("channel name") for _ in range(n_names)]
    stats = reader.floats((C_dyn, 2), "stats table")
    dynamic = reader.floats((T, C_dyn, H, W), "dynamic payload")
    static = reader.floats((C_static, H, W), "static payload")
    if reader.offset != len(raw):
        log.warning("%s: %d trailing bytes ignored", path, len(raw) - reader.offset)
    return FrameDataset(dynamic, static, names, stats[:, 0], stats[:, 1], cadence)


# -------------------
# Windows and samples
# -------------------
def make_windows(ds, t_in, t_out):
    if t_in < 1 or t_out < 1:
        raise ConfigError(f"t_in and t_out must be >= 1, got {t_in}, {t_out}")
    return list(range(max(0, ds.n_frames - t_in - t_out + 1)))


def _normalize(frames, ds, channels):
    mean = ds.mean[channels][None, :, None, None]
    std = ds.std[channels][None, :, None, None]
    return ((frames - mean) / std).astype(np.float32)


def denormalize(frames, ds, channels=None):
    """(T, C, H, W) normalized frames of `channels` back to physical units."""
    channels = list(range(ds.n_dynamic)) if channels is None else list(channels)
    frames = np.asarray(frames, dtype=np.float32)
    mean = ds.mean[channels][None, :, None, None]
    std = ds.std[channels][None, :, None, None]
    return (frames * std + mean).astype(np.float32)


def _sample_arrays(ds, start, layout):
    windows = ds.n_frames - layout.t_in - layout.t_out + 1
    if not 0 <= start < windows:
        raise DataError(f"window start {start} out of range: dataset has {max(windows, 0)} windows "
                        f"for t_in={layout.t_in} t_out={layout.t_out}")
    targets = layout.targets(ds.n_dynamic)
    everything = list(range(ds.n_dynamic))
    frames = _normalize(ds.dynamic[start:start + layout.t_in], ds, everything)
    static = ds.static_scaled()
    H, W = ds.height, ds.width
    if layout.static_layout == "once":
        x = np.concatenate([frames.reshape(-1, H, W), static], axis=0)
    else:
        tiled = np.broadcast_to(static, (layout.t_in,) + static.shape)
        x = np.concatenate([frames, tiled], axis=1).reshape(-1, H, W)
    future = ds.dynamic[start + layout.t_in:start + layout.t_in + layout.t_out][:, targets]
    y = _normalize(future, ds, targets).reshape(-1, H, W)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def assemble_sample(ds, start, layout):
    x, y = _sample_arrays(ds, start, layout)
    return Sample(Tensor(x, dtype=np.float32), Tensor(y, dtype=np.float32), start)


def split_sample_input(x, layout, c_dyn, c_static):
    """Undo the input stacking: (frames (t_in, c_dyn, H, W), static (c_static, H, W))."""
    x = np.asarray(x)
    expected = layout.in_channels(c_dyn, c_static)
    if x.ndim != 3 or x.shape[0] != expected:
        raise DimensionError(f"input axis 0 (channel) has {x.shape[0] if x.ndim else 0}, "
                             f"layout {layout.describe(c_dyn, c_static)} needs {expected}")
    H, W = x.shape[1:]
    if layout.static_layout == "once":
        frames = x[:layout.t_in * c_dyn].reshape(layout.t_in, c_dyn, H, W)
        static = x[layout.t_in * c_dyn:]
    else:
        per_frame = x.reshape(layout.t_in, c_dyn + c_static, H, W)
        frames = per_frame[:, :c_dyn]
        static = per_frame[0, c_dyn:]
    return frames, static


def assemble_batch(ds, starts, layout):
    pairs = [_sample_arrays(ds, s, layout) for s in starts]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


class _Failure:
    def __init__(self, error):
        self.error = error


_DONE = object()


class BatchLoader:
    """
    Yields (inputs, targets) arrays for each list of window starts, in order.

    With prefetch > 0 batches are assembled on a background thread and handed
    over through a queue holding at most `prefetch` batches.
    """

    def __init__(self, ds, batches, layout, prefetch=2):
        self.ds = ds
        self.batches = [list(b) for b in batches]
        self.layout = layout
        self.prefetch = int(prefetch)

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        if self.prefetch < 1:
            for starts in self.batches:
                yield assemble_batch(self.ds, starts, self.layout)
            return

        handoff = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def put(item):
            while not stop.is_set():
                try:
                    handoff.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def worker():
            try:
                for starts in self.batches:
                    if not put(assemble_batch(self.ds, starts, self.layout)):
                        return
                put(_DONE)
            except Exception as e:
                put(_Failure(e))

        thread = threading.Thread(target=worker, name="batch-loader", daemon=True)
        thread.start()
        try:
            while True:
                item = handoff.get()
                if item is _DONE:
                    break
                if isinstance(item, _Failure):
                    raise item.error
                yield item
        finally:
            stop.set()
            thread.join(timeout=1.0)


# -------------------
# Statistics and splits
# -------------------
def compute_stats(ds, channel):
    """Population mean/std of one dynamic channel over all frames and pixels."""
    if not 0 <= channel < ds.n_dynamic:
        raise ConfigError(f"channel {channel} outside the {ds.n_dynamic} dynamic channels")
    values = ds.dynamic[:, channel].astype(np.float64)
    if values.size == 0:
        return 0.0, 1.0
    return float(values.mean()), max(float(values.std()), STD_FLOOR)


def with_stats(dynamic, static, names, cadence=DEFAULT_CADENCE):
    """Build a dataset whose stats are computed from its own frames."""
    C = dynamic.shape[1]
    ds = FrameDataset(dynamic, static, names, np.zeros(C), np.ones(C), cadence)
    stats = [compute_stats(ds, c) for c in range(C)]
    ds.mean = np.array([m for m, _ in stats], dtype=np.float32)
    ds.std = np.array([s for _, s in stats], dtype=np.float32)
    return ds


def split_dataset(ds, valid_fraction=0.1, test_fraction=0.2):
    """Chronological (train, valid, test) split; all parts keep the parent's stats."""
    for name, value in (("valid_fraction", valid_fraction), ("test_fraction", test_fraction)):
        if not 0 <= value < 1:
            raise ConfigError(f"{name} must be in [0, 1), got {value}")
    T = ds.n_frames
    n_test = int(round(T * test_fraction))
    n_valid = int(round(T * valid_fraction))
    n_train = T - n_valid - n_test
    if n_train < 0:
        raise ConfigError(f"valid_fraction + test_fraction leave no training frames out of {T}")
    bounds = (0, n_train, n_train + n_valid, T)
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        parts.append(FrameDataset(ds.dynamic[lo:hi].copy(), ds.static, ds.channel_names,
                                  ds.mean, ds.std, ds.cadence_minutes))
    log.debug("Split %d frames into %d/%d/%d", T, n_train, n_valid, n_test)
    return tuple(parts)


# -------------------
# Synthetic generator
# -------------------
def _wrapped(delta, period):
    return (delta + period / 2) % period - period / 2


def gen_synthetic(seed, T, H, W, n_blobs=3, velocity_range=1.0, cadence=DEFAULT_CADENCE):
    """
    Gaussian blobs drifting at constant velocity on a torus.

    Channels: intensity, excess over the threshold, tanh(intensity), and the
    intensity > threshold mask. Statics: row and column coordinates and a
    seeded smooth elevation field.
    """
    if H < 16 or W < 16:
        raise ConfigError(f"synthetic frames must be at least 16x16, got {H}x{W}")
    if T < 0 or n_blobs < 0 or velocity_range < 0:
        raise ConfigError("T, n_blobs and velocity_range must be non-negative")
    rng = np.random.default_rng(seed)
    cy = rng.uniform(0, H, n_blobs)
    cx = rng.uniform(0, W, n_blobs)
    vy = rng.uniform(-velocity_range, velocity_range, n_blobs)
    vx = rng.uniform(-velocity_range, velocity_range, n_blobs)
    sigma = rng.uniform(min(H, W) / 16, min(H, W) / 8, n_blobs)
    amplitude = rng.uniform(0.5, 1.5, n_blobs)
    elevation = gaussian_filter(rng.standard_normal((H, W)), sigma=min(H, W) / 8, mode="wrap")

    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    dynamic = np.empty((T, len(SYNTH_DYNAMIC), H, W), dtype=np.float32)
    for t in range(T):
        intensity = np.zeros((H, W))
        for b in range(n_blobs):
            dy = _wrapped(rows - (cy[b] + vy[b] * t), H)
            dx = _wrapped(cols - (cx[b] + vx[b] * t), W)
            intensity += amplitude[b] * np.exp(-(dy ** 2 + dx ** 2) / (2 * sigma[b] ** 2))
        dynamic[t, 0] = intensity
        dynamic[t, 1] = np.maximum(intensity - SYNTH_THRESHOLD, 0)
        dynamic[t, 2] = np.tanh(intensity)
        dynamic[t, 3] = intensity > SYNTH_THRESHOLD

    static = np.stack([
        np.broadcast_to(rows / (H - 1), (H, W)),
        np.broadcast_to(cols / (W - 1), (H, W)),
        elevation,
    ]).astype(np.float32)
    ds = with_stats(dynamic, static, list(SYNTH_DYNAMIC + SYNTH_STATIC), cadence)
    log.debug("Generated %d synthetic frames (%dx%d, %d blobs, seed %s)", T, H, W, n_blobs, seed)
    return ds
