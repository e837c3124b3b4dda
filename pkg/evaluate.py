"""
Evaluation: persistence baseline, MSE scoring, checkpoint ensembles, reports.

Scores are computed on normalized target channels, the same scale the models
are trained on. Each model row is also divided by the persistence MSE, so the
persistence row reads exactly 1.0.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from prettytable import PrettyTable
from scipy.stats import spearmanr
from tqdm import tqdm

from data import BatchLoader, make_windows, split_sample_input
from errors import ConfigError, DimensionError
from models import Model, forward_model
from tensor import Tensor, no_grad

log = logging.getLogger(__name__)

REPORT_TEXT = "report.txt"
REPORT_CSV = "report.csv"
TREND_THRESHOLD = 0.5


@dataclass
class EvalRow:
    name: str
    kind: str
    raw: float
    normalized: Optional[float]
    curve: list
    members: list = field(default_factory=list)

    @property
    def trend(self):
        return lead_time_trend(self.curve)


@dataclass
class EvalReport:
    rows: list
    samples: int
    t_out: int
    normalization_undefined: bool = False

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def persistence_predict(sample_input, layout, c_dyn, c_static):
    """Repeat the last input frame's target channels for every lead time."""
    frames, _ = split_sample_input(_array(sample_input), layout, c_dyn, c_static)
    last = frames[-1, layout.targets(c_dyn)]
    return np.tile(last, (layout.t_out, 1, 1))


def score(pred, target):
    pred = _array(pred)
    target = _array(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def normalized_score(raw, persistence_raw):
    """raw / persistence_raw, or None when the baseline is perfect."""
    if persistence_raw == 0:
        return None
    return raw / persistence_raw


def predict(model, batch):
    """Inference-mode forward pass on a (B, C_in, H, W) array."""
    dtype = next(iter(model.parameters.values())).dtype
    with no_grad():
        return forward_model(model, Tensor(_array(batch), dtype=dtype), training=False).data


def ensemble_predict(members, batch=None):
    """
    Unweighted mean of member predictions, summed in member order.

    Members are prediction arrays or models; models need `batch`.
    """
    if not members:
        raise ConfigError("an ensemble needs at least one member")
    preds = []
    for m in members:
        if isinstance(m, Model):
            if batch is None:
                raise ConfigError("ensemble members given as models need an input batch")
            preds.append(predict(m, batch))
        else:
            preds.append(_array(m))
    shape = preds[0].shape
    for i, p in enumerate(preds):
        if p.shape != shape:
            raise DimensionError(f"ensemble member {i} predicts shape {p.shape}, member 0 predicts {shape}")
    total = np.zeros(shape, dtype=np.float64)
    for p in preds:
        total += p
    return (total / len(preds)).astype(preds[0].dtype)


def lead_time_trend(curve):
    """Spearman rank correlation of lead time against per-lead MSE (nan if undefined)."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size < 2 or np.all(curve == curve[0]):
        return float("nan")
    return float(spearmanr(np.arange(1, curve.size + 1), curve).statistic)


def _lead_sums(pred, target, t_out):
    B = target.shape[0]
    diff = pred.astype(np.float64) - target.astype(np.float64)
    diff = diff.reshape(B, t_out, -1)
    return np.sum(diff * diff, axis=(0, 2))


def evaluate(models, ensembles, dataset, layout, batch_size=16, progress=False):
    """
    Score persistence, then each model, then each ensemble on every window.

    `models` is a list of (name, Model); `ensembles` a list of
    (name, [model names]).
    """
    windows = make_windows(dataset, layout.t_in, layout.t_out)
    if not windows:
        raise ConfigError(f"evaluation set has {dataset.n_frames} frames, too few for "
                          f"t_in={layout.t_in} + t_out={layout.t_out}")
    c_dyn, c_static = dataset.n_dynamic, dataset.n_static
    expected = (layout.in_channels(c_dyn, c_static), layout.out_channels(c_dyn))
    names = [name for name, _ in models]
    if len(set(names)) != len(names):
        raise ConfigError(f"model names must be unique, got {names}")
    for name, model in models:
        found = (model.spec.in_channels, model.spec.out_channels)
        if found != expected:
            raise ConfigError(f"{name} maps {found[0]} -> {found[1]} channels, "
                              f"dataset layout needs {layout.describe(c_dyn, c_static)}")
    for name, members in ensembles:
        unknown = [m for m in members if m not in names]
        if unknown or not members:
            raise ConfigError(f"ensemble {name} refers to unknown members {unknown or members}")

    rows = ["persistence"] + names + [name for name, _ in ensembles]
    sums = {name: np.zeros(layout.t_out) for name in rows}
    per_lead = 0
    batches = [windows[i:i + batch_size] for i in range(0, len(windows), batch_size)]
    for x, y in tqdm(BatchLoader(dataset, batches, layout, prefetch=0), total=len(batches),
                     desc="evaluate", disable=not progress, leave=False):
        per_lead += y[0].size // layout.t_out * len(y)
        baseline = np.stack([persistence_predict(sample, layout, c_dyn, c_static) for sample in x])
        sums["persistence"] += _lead_sums(baseline, y, layout.t_out)
        preds = {}
        for name, model in models:
            preds[name] = predict(model, x)
            sums[name] += _lead_sums(preds[name], y, layout.t_out)
        for name, members in ensembles:
            mean = ensemble_predict([preds[m] for m in members])
            sums[name] += _lead_sums(mean, y, layout.t_out)

    curves = {name: sums[name] / per_lead for name in rows}
    raw = {name: float(np.sum(sums[name]) / (per_lead * layout.t_out)) for name in rows}
    base = raw["persistence"]
    undefined = base == 0
    if undefined:
        log.warning("Persistence MSE is 0; normalized scores are undefined")

    report = EvalReport([EvalRow("persistence", "persistence", base, 1.0, curves["persistence"].tolist())],
                        len(windows), layout.t_out, undefined)
    for name in names:
        report.rows.append(EvalRow(name, "model", raw[name], normalized_score(raw[name], base),
                                   curves[name].tolist()))
    for name, members in ensembles:
        report.rows.append(EvalRow(name, "ensemble", raw[name], normalized_score(raw[name], base),
                                   curves[name].tolist(), list(members)))
    for r in report.rows:
        log.debug("%s raw %.6g normalized %s", r.name, r.raw, r.normalized)
    return report


def format_report(report):
    table = PrettyTable()
    table.field_names = ["Model", "Kind", "Raw MSE", "Normalized MSE", "Lead trend"]
    table.align["Model"] = "l"
    for r in report.rows:
        normalized = "undefined" if r.normalized is None else f"{r.normalized:.3f}"
        trend = r.trend
        table.add_row([r.name, r.kind, f"{r.raw:.6g}", normalized, "-" if np.isnan(trend) else f"{trend:+.2f}"])
    lines = [table.get_string(), f"samples: {report.samples}  lead times: {report.t_out}"]
    if report.normalization_undefined:
        lines.append("normalization undefined: persistence MSE is 0, compare raw MSE only")
    for r in report.rows:
        if r.kind == "ensemble":
            lines.append(f"{r.name} = mean({', '.join(r.members)})")
    degrading = [r.name for r in report.rows if r.kind != "persistence" and r.trend >= TREND_THRESHOLD]
    if degrading:
        lines.append(f"error grows with lead time (Spearman >= {TREND_THRESHOLD}): {', '.join(degrading)}")
    return "\n".join(lines) + "\n"


def report_frame(report):
    records = []
    for r in report.rows:
        record = {
            "name": r.name,
            "kind": r.kind,
            "raw_mse": r.raw,
            "normalized": r.normalized,
            "members": ";".join(r.members),
        }
        record.update({f"lead_{i}": v for i, v in enumerate(r.curve, start=1)})
        records.append(record)
    return pd.DataFrame.from_records(records)


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    text_path = os.path.join(out_dir, REPORT_TEXT)
    csv_path = os.path.join(out_dir, REPORT_CSV)
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(format_report(report))
    report_frame(report).to_csv(csv_path, index=False, float_format="%.9g")
    log.info("Wrote %s and %s", text_path, csv_path)
    return text_path, csv_path
