"""
SMCK checkpoint files.

Layout (little-endian):
    "SMCK" | u16 version | u32 summary length | summary (UTF-8 JSON)
    u32 parameter count | records
    u32 buffer count    | records
    record: u16 name length | name | u8 ndim | u32 dims... | f32 data

The summary carries the model spec plus whatever the writer adds (sample
layout, training config, epoch, losses). Buffers hold the batch-norm running
statistics, so a reloaded model evaluates exactly like the saved one.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass

from binio import ByteReader, pack_floats, pack_string, read_file
from errors import FormatError
from models import ModelSpec, build_model

log = logging.getLogger(__name__)

MAGIC = b"SMCK"
VERSION = 1


@dataclass
class Checkpoint:
    path: str
    epoch: int
    step: int
    train_loss: float
    valid_loss: float


def _record(name, array):
    head = pack_string(name) + struct.pack("<B", array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + pack_floats(array)


def save_checkpoint(path, model, summary=None):
    body = dict(summary or {})
    body["spec"] = model.spec.model_dump()
    blob = json.dumps(body, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    parts.append(struct.pack("<I", len(model.parameters)))
    parts.extend(_record(name, p.data) for name, p in model.parameters.items())
    parts.append(struct.pack("<I", len(model.buffers)))
    parts.extend(_record(name, b) for name, b in model.buffers.items())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    log.debug("Wrote checkpoint %s", path)
    return path


def _read_record(reader):
    name = reader.string("record name")
    (ndim,) = reader.unpack("<B", f"{name} rank")
    shape = reader.unpack(f"<{ndim}I", f"{name} shape")
    return name, reader.floats(shape, f"{name} payload")


def _read_header(reader):
    if reader.take(4, "magic") != MAGIC:
        raise FormatError(f"{reader.path}: not an SMCK checkpoint (bad magic)")
    version, length = reader.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"{reader.path}: unsupported SMCK version {version}")
    try:
        return json.loads(reader.take(length, "summary").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{reader.path}: unreadable summary block ({e})") from e


def read_summary(path):
    raw = read_file(path, "checkpoint")
    return _read_header(ByteReader(raw, path))


def load_checkpoint(path, dtype=None):
    """Return (model, summary). Tensor names and shapes must match the stored ModelSpec."""
    raw = read_file(path, "checkpoint")
    reader = ByteReader(raw, path)
    summary = _read_header(reader)
    if "spec" not in summary:
        raise FormatError(f"{path}: summary has no model spec")
    spec = ModelSpec(**summary["spec"])
    model = build_model(spec, seed=0, dtype=dtype)
    for table in (model.parameters, model.buffers):
        (count,) = reader.unpack("<I", "record count")
        if count != len(table):
            raise FormatError(f"{path}: {count} records, spec {spec.variant} needs {len(table)}")
        for _ in range(count):
            name, data = _read_record(reader)
            if name not in table:
                raise FormatError(f"{path}: unexpected tensor {name!r}")
            current = table[name]
            if current.shape != data.shape:
                raise FormatError(f"{path}: {name} has shape {data.shape}, expected {current.shape}")
            if table is model.parameters:
                current.data = data.astype(current.dtype)
            else:
                current[...] = data
    log.debug("Loaded checkpoint %s (%s)", path, spec.variant)
    return model, summary
