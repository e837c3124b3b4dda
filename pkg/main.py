"""
Command-line orchestrator: synth -> train -> evaluate / predict / render.

    python main.py synth --out data/desk.stwf
    python main.py train --data data/desk.stwf --out runs/desk
    python main.py evaluate runs/desk/epoch_09.smck runs/desk/epoch_10.smck --data data/desk.stwf
    python main.py params --all

Every command resolves one flat RunConfig (defaults < --config file <
--set key=value < command flags) and writes it as run_config.txt next to
what it produces. Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric.
"""
import argparse
import logging
import os
import sys
from typing import Literal, Optional

from prettytable import PrettyTable
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from checkpoint import load_checkpoint
from console import add_log_file, setup_logging
from data import (
    SYNTH_DYNAMIC,
    SYNTH_STATIC,
    FrameDataset,
    SampleLayout,
    assemble_sample,
    denormalize,
    gen_synthetic,
    read_dataset,
    split_dataset,
    write_dataset,
)
from errors import ConfigError, ContractError, DataError, NumericError
from evaluate import evaluate, format_report, predict, write_report
from models import VARIANTS, ModelSpec, analytic_layer_counts, analytic_param_count, build_model, layer_counts, param_count
from optim import TrainConfig, fit
from render import render_dataset
from tensor import set_default_dtype, set_num_threads

log = logging.getLogger("main")

DEFAULT_OUT_DIR = "runs"
DEFAULT_DATASET = os.path.join("data", "synthetic.stwf")
RUN_CONFIG = "run_config.txt"
TRAIN_LOG = "train.log"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

LIST_KEYS = {"target_channels": ",", "checkpoints": ",", "ensembles": ";",
             "render_frames": ",", "render_channels": ","}


class RunConfig(BaseModel):
    """Every knob of every command, as one flat key=value namespace."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # global
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    dtype: Literal["f32", "f64"] = "f32"

    # files
    dataset: str = DEFAULT_DATASET
    out_dir: str = DEFAULT_OUT_DIR
    checkpoint: Optional[str] = None
    checkpoints: tuple[str, ...] = ()
    ensembles: tuple[str, ...] = ()
    prediction: str = "prediction.stwf"
    render_dir: str = "panels"
    render_frames: Optional[tuple[int, ...]] = None
    render_channels: Optional[tuple[int, ...]] = None

    # dataset split and windows
    valid_fraction: float = 0.1
    test_fraction: float = 0.2
    split: Literal["train", "valid", "test", "all"] = "test"
    window: int = Field(0, ge=0)
    t_in: int = 4
    t_out: int = 32
    target_channels: Optional[tuple[int, ...]] = None
    static_layout: Literal["once", "per_frame"] = "once"

    # model
    variant: Literal["unet", "unet_dsc", "unet_cbam", "smaat_unet"] = "smaat_unet"
    base_width: int = 64
    depth: int = 5
    cbam_reduction: int = 16
    spatial_kernel: int = 7
    bilinear: bool = True
    kernel_size: int = 3
    kernels_per_layer: int = 2

    # training
    epochs: int = 10
    lr_max: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t0: Optional[int] = None
    t_mult: int = 2
    batch_size: int = 4
    checkpoint_every: int = 1
    schedule: Literal["cawrs", "constant"] = "cawrs"
    prefetch: int = 2
    progress: bool = True

    # synthetic data
    frames: int = Field(400, ge=0)
    height: int = 32
    width: int = 32
    blobs: int = Field(3, ge=0)
    velocity: float = Field(1.0, ge=0)
    cadence: int = 15

    @field_validator("*", mode="before")
    @classmethod
    def _parse_text(cls, value, info):
        if not isinstance(value, str):
            return value
        text = value.strip()
        if text.lower() == "none" and cls.model_fields[info.field_name].default is None:
            return None
        if info.field_name in LIST_KEYS:
            sep = LIST_KEYS[info.field_name]
            return tuple(part.strip() for part in text.split(sep) if part.strip())
        return text

    def layout(self):
        return SampleLayout(t_in=self.t_in, t_out=self.t_out, target_channels=self.target_channels,
                            static_layout=self.static_layout)

    def model_spec(self, in_channels, out_channels):
        return ModelSpec(variant=self.variant, in_channels=in_channels, out_channels=out_channels,
                         base_width=self.base_width, depth=self.depth, cbam_reduction=self.cbam_reduction,
                         spatial_kernel=self.spatial_kernel, bilinear=self.bilinear,
                         kernel_size=self.kernel_size, kernels_per_layer=self.kernels_per_layer)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, lr_max=self.lr_max, lr_min=self.lr_min,
                           betas=(self.beta1, self.beta2), eps=self.eps, t0=self.t0, t_mult=self.t_mult,
                           batch_size=self.batch_size, seed=self.seed, checkpoint_every=self.checkpoint_every,
                           schedule=self.schedule, prefetch=self.prefetch, progress=self.progress)


# -------------------
# Config text
# -------------------
def parse_config_text(text, source="config"):
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def format_config(cfg):
    lines = ["# resolved run configuration; feed back with --config"]
    for key in RunConfig.model_fields:
        value = getattr(cfg, key)
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = LIST_KEYS[key].join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def write_run_config(cfg, directory):
    os.makedirs(directory or ".", exist_ok=True)
    path = os.path.join(directory, RUN_CONFIG)
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
    return path


def resolve_config(config_path=None, sets=(), flags=None):
    """defaults < config file < --set overrides < explicit flags."""
    values = {}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as f:
                values.update(parse_config_text(f.read(), config_path))
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e.strerror or e}") from e
    for item in sets or ():
        values.update(parse_config_text(item, "--set"))
    values.update({k: v for k, v in (flags or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(_validation_message(e)) from e


def _validation_message(error):
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def _select_split(cfg, ds):
    if cfg.split == "all":
        return ds
    train, valid, test = split_dataset(ds, cfg.valid_fraction, cfg.test_fraction)
    return {"train": train, "valid": valid, "test": test}[cfg.split]


def _layout_for(summary, cfg):
    if "layout" in summary:
        return SampleLayout(**summary["layout"])
    return cfg.layout()


def _check_channels(name, model, ds, layout):
    expected = (layout.in_channels(ds.n_dynamic, ds.n_static), layout.out_channels(ds.n_dynamic))
    found = (model.spec.in_channels, model.spec.out_channels)
    if found != expected:
        raise ConfigError(f"{name} expects {found[0]} input / {found[1]} output channels; "
                          f"dataset ({ds.n_dynamic} dynamic, {ds.n_static} static) with layout "
                          f"{layout.describe(ds.n_dynamic, ds.n_static)}")


# -------------------
# Commands
# -------------------
def cmd_synth(cfg):
    ds = gen_synthetic(cfg.seed, cfg.frames, cfg.height, cfg.width, cfg.blobs, cfg.velocity, cfg.cadence)
    directory = os.path.dirname(cfg.dataset)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_dataset(ds, cfg.dataset)
    write_run_config(cfg, directory)
    print(f"[Synth] Wrote {cfg.dataset}: {ds.n_frames} frames of {ds.height}x{ds.width}, "
          f"channels {', '.join(ds.channel_names)}")
    return EXIT_OK


def cmd_train(cfg):
    ds = read_dataset(cfg.dataset)
    layout = cfg.layout()
    spec = cfg.model_spec(layout.in_channels(ds.n_dynamic, ds.n_static), layout.out_channels(ds.n_dynamic))
    train_cfg = cfg.train_config()
    train, valid, test = split_dataset(ds, cfg.valid_fraction, cfg.test_fraction)
    model = build_model(spec, seed=cfg.seed)
    log.info("%s: %d parameters, %d/%d/%d frames train/valid/test",
             spec.variant, param_count(model), train.n_frames, valid.n_frames, test.n_frames)

    os.makedirs(cfg.out_dir, exist_ok=True)
    write_run_config(cfg, cfg.out_dir)
    handler = add_log_file(os.path.join(cfg.out_dir, TRAIN_LOG))
    try:
        checkpoints = fit(model, train, valid, train_cfg, layout, cfg.out_dir)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    for ck in checkpoints:
        print(f"[Train] epoch {ck.epoch:>3}  train {ck.train_loss:.5f}  valid {ck.valid_loss:.5f}  -> {ck.path}")
    return EXIT_OK


def cmd_predict(cfg):
    if not cfg.checkpoint:
        raise ConfigError("predict needs a checkpoint (--checkpoint or checkpoint=...)")
    model, summary = load_checkpoint(cfg.checkpoint)
    layout = _layout_for(summary, cfg)
    ds = read_dataset(cfg.dataset)
    _check_channels(cfg.checkpoint, model, ds, layout)
    sample = assemble_sample(ds, cfg.window, layout)
    targets = layout.targets(ds.n_dynamic)
    pred = predict(model, sample.input.data[None])[0]
    frames = denormalize(pred.reshape(layout.t_out, len(targets), ds.height, ds.width), ds, targets)
    names = [ds.dynamic_names[c] for c in targets] + ds.static_names
    fragment = FrameDataset(frames, ds.static, names, ds.mean[targets], ds.std[targets], ds.cadence_minutes)
    directory = os.path.dirname(cfg.prediction)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_dataset(fragment, cfg.prediction)
    write_run_config(cfg, directory)
    print(f"[Predict] Wrote {layout.t_out} frames from window {cfg.window} to {cfg.prediction}")
    return EXIT_OK


def _model_names(paths):
    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [os.path.normpath(p) for p in paths]


def _parse_ensembles(items):
    groups = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"ensemble must look like name=a,b, got {item!r}")
        name, members = item.split("=", 1)
        groups.append((name.strip(), [m.strip() for m in members.split(",") if m.strip()]))
    return groups


def cmd_evaluate(cfg):
    if not cfg.checkpoints:
        raise ConfigError("evaluate needs at least one checkpoint")
    ds = read_dataset(cfg.dataset)
    names = _model_names(cfg.checkpoints)
    models = []
    layout = None
    for name, path in zip(names, cfg.checkpoints):
        model, summary = load_checkpoint(path)
        this = _layout_for(summary, cfg)
        if layout is not None and this != layout:
            raise ConfigError(f"{path} was trained with layout {this}, {cfg.checkpoints[0]} with {layout}")
        layout = this
        _check_channels(path, model, ds, layout)
        models.append((name, model))
    ensembles = []
    if len(models) >= 2:
        ensembles.append(("ensemble", list(names)))
    ensembles += _parse_ensembles(cfg.ensembles)

    subset = _select_split(cfg, ds)
    report = evaluate(models, ensembles, subset, layout, cfg.batch_size, progress=cfg.progress)
    write_report(report, cfg.out_dir)
    write_run_config(cfg, cfg.out_dir)
    print(format_report(report), end="")
    return EXIT_OK


def cmd_params(cfg, all_variants=False):
    layout = cfg.layout()
    c_dyn, c_static = len(SYNTH_DYNAMIC), len(SYNTH_STATIC)
    in_ch, out_ch = layout.in_channels(c_dyn, c_static), layout.out_channels(c_dyn)
    if all_variants:
        base = cfg.model_spec(in_ch, out_ch).model_dump()
        specs = [ModelSpec(**{**base, "variant": v}) for v in VARIANTS]
        specs.sort(key=analytic_param_count)
        table = PrettyTable(["Model", "Parameters", "Millions"])
        table.align["Model"] = "l"
        table.align["Parameters"] = "r"
        for spec in specs:
            n = analytic_param_count(spec)
            table.add_row([spec.variant, f"{n:,}", f"{n / 1e6:.2f}M"])
        print(f"[Params] in={in_ch} out={out_ch} base={cfg.base_width} depth={cfg.depth}")
        print(table)
        breakdown = [dict(analytic_layer_counts(spec)) for spec in specs]
        blocks = max(breakdown, key=len)
        table = PrettyTable(["Block"] + [spec.variant for spec in specs])
        table.align = "r"
        table.align["Block"] = "l"
        for block in blocks:
            table.add_row([block] + [f"{counts[block]:,}" if block in counts else "-" for counts in breakdown])
        print(table)
        return EXIT_OK

    model = build_model(cfg.model_spec(in_ch, out_ch), seed=cfg.seed)
    table = PrettyTable(["Block", "Parameters"])
    table.align["Block"] = "l"
    table.align["Parameters"] = "r"
    for block, n in layer_counts(model):
        table.add_row([block, f"{n:,}"])
    total = param_count(model)
    table.add_row(["total", f"{total:,}"])
    print(f"[Params] {cfg.variant}: in={in_ch} out={out_ch} base={cfg.base_width} depth={cfg.depth}")
    print(table)
    return EXIT_OK


def cmd_render(cfg):
    ds = read_dataset(cfg.dataset)
    paths = render_dataset(ds, cfg.render_dir, cfg.render_frames, cfg.render_channels)
    write_run_config(cfg, cfg.render_dir)
    print(f"[Render] {len(paths)} panels in {cfg.render_dir}")
    return EXIT_OK


# -------------------
# Argument parsing
# -------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with run settings")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads inside conv2d; 1 is bit-exact")
    common.add_argument("--dtype", choices=["f32", "f64"])
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(description="SkyFlow weather nowcasting")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic STWF dataset")
    synth.add_argument("--out", dest="dataset")
    synth.add_argument("--frames", type=int)
    synth.add_argument("--height", type=int)
    synth.add_argument("--width", type=int)
    synth.add_argument("--blobs", type=int)
    synth.add_argument("--velocity", type=float)

    train = sub.add_parser("train", parents=[common], help="train a model and write checkpoints")
    train.add_argument("--data", dest="dataset")
    train.add_argument("--out", dest="out_dir")
    train.add_argument("--variant", choices=VARIANTS)
    train.add_argument("--epochs", type=int)

    pred = sub.add_parser("predict", parents=[common], help="forecast one window to an STWF file")
    pred.add_argument("--checkpoint")
    pred.add_argument("--data", dest="dataset")
    pred.add_argument("--window", type=int)
    pred.add_argument("--out", dest="prediction")

    ev = sub.add_parser("evaluate", parents=[common], help="score checkpoints against persistence")
    ev.add_argument("checkpoints", nargs="*")
    ev.add_argument("--data", dest="dataset")
    ev.add_argument("--split", choices=["train", "valid", "test", "all"])
    ev.add_argument("--ensemble", dest="ensembles", action="append", metavar="NAME=A,B")
    ev.add_argument("--out", dest="out_dir")

    params = sub.add_parser("params", parents=[common], help="parameter counts per block or per variant")
    params.add_argument("--variant", choices=VARIANTS)
    params.add_argument("--all", action="store_true", help="all four variants, ascending")

    render = sub.add_parser("render", parents=[common], help="write PGM panels of dataset frames")
    render.add_argument("--data", dest="dataset")
    render.add_argument("--frames", dest="render_frames", help="comma-separated frame indices")
    render.add_argument("--channels", dest="render_channels", help="comma-separated dynamic channels")
    render.add_argument("--out", dest="render_dir")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def _flags(args):
    flags = {}
    for key in RunConfig.model_fields:
        value = getattr(args, key, None)
        if value is None or value == []:
            continue
        flags[key] = tuple(value) if isinstance(value, list) else value
    return flags


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = resolve_config(args.config, args.set, _flags(args))
        set_default_dtype(cfg.dtype)
        set_num_threads(cfg.threads)
        if args.command == "params":
            return cmd_params(cfg, all_variants=args.all)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ContractError) as e:
        log.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except ValidationError as e:
        log.error("Configuration error: %s", _validation_message(e))
        return EXIT_CONFIG
    except DataError as e:
        log.error("Data error: %s", e)
        return EXIT_DATA
    except NumericError as e:
        log.error("Numeric error: %s", e)
        if e.history:
            log.error("Last losses: %s", ", ".join(f"{v:.4g}" for v in e.history))
        return EXIT_NUMERIC
    finally:
        set_default_dtype("f32")
        set_num_threads(1)


if __name__ == "__main__":
    sys.exit(main())
