"""Command-line entry point: ``fourcropnet <command> [options]``.

Exit codes: 0 success, 2 configuration, 3 data/IO, 4 numerical abort, 5 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor_core as tc
from .data import (
    AugmentConfig,
    ImageStore,
    generate_synthetic_dataset,
    load_image,
    read_manifest,
    scan_dataset,
    split_dataset,
    write_manifest,
)
from .errors import ConfigError, DataError, FourCropNetError, VersionError
from .model import ModelConfig, build_model, format_summary, load_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    evaluate,
    gradcheck_inputs,
    gradient_check,
    load_state,
    train,
)

log = logging.getLogger("fourcropnet")

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentConfig}
PATH_KEYS = ("data", "out", "checkpoint", "manifest")
GRADCHECK_DEFAULTS = {"input_size": 32, "batch": 2, "per_tensor": 2, "tolerance": 1e-3, "eps": 1e-5}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    augment: AugmentConfig
    paths: dict
    gradcheck: dict

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        """Build from ``{"section.field": value}``; unknown keys are a config error."""
        grouped = {name: {} for name in (*SECTIONS, "paths", "gradcheck")}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section not in grouped or not name:
                raise ConfigError(f"unknown config key {key!r}")
            grouped[section][name] = value
        built = {}
        for section, klass in SECTIONS.items():
            fields = {f.name for f in dataclasses.fields(klass)}
            unknown = set(grouped[section]) - fields
            if unknown:
                raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
            try:
                built[section] = klass(**grouped[section])
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        bad_paths = set(grouped["paths"]) - set(PATH_KEYS)
        if bad_paths:
            raise ConfigError(f"unknown paths keys: {sorted(bad_paths)}")
        bad_gc = set(grouped["gradcheck"]) - set(GRADCHECK_DEFAULTS)
        if bad_gc:
            raise ConfigError(f"unknown gradcheck keys: {sorted(bad_gc)}")
        return cls(built["model"], built["train"], built["augment"], grouped["paths"],
                   {**GRADCHECK_DEFAULTS, **grouped["gradcheck"]})

    def to_flat(self) -> dict:
        flat = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
            flat.update({f"{section}.{k}": v for k, v in d.items()})
        flat.update({f"paths.{k}": v for k, v in self.paths.items()})
        flat.update({f"gradcheck.{k}": v for k, v in self.gradcheck.items()})
        return flat


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    flat: dict = {}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        flat.update(loaded)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        flat[key] = _parse_value(value)
    shortcuts = {
        "seed": "train.seed", "out": "paths.out", "data": "paths.data", "epochs": "train.epochs",
        "batch_size": "train.batch_size", "lr": "train.learning_rate", "optimizer": "train.optimizer",
        "input_size": "model.input_size", "num_classes": "model.num_classes", "head": "model.head",
        "checkpoint": "paths.checkpoint", "manifest": "paths.manifest",
    }
    for attr, key in shortcuts.items():
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    if getattr(args, "no_augment", False):
        flat["train.augment"] = False
    return RunConfig.from_flat(flat)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.get("out", "runs/latest"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if "data" not in cfg.paths:
        raise ConfigError("training needs a data root (--data or paths.data)")
    index = scan_dataset(cfg.paths["data"])
    model_cfg = dataclasses.replace(cfg.model, num_classes=index.class_count)
    cfg.model = model_cfg
    out = _out_dir(cfg)
    (out / "effective_config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")
    split = split_dataset(index, cfg.train.seed)
    write_manifest(split, out / "split.csv", index.root)
    model = build_model(model_cfg, seed=cfg.train.seed, class_names=index.class_names)
    store = ImageStore(model_cfg.input_size, tc.get_dtype())
    result = train(model, split.train, split.valid, cfg.train, cfg.augment, store)
    result.curve.to_csv(out / "curves.csv")
    save_checkpoint(model, out / "last.fcn")
    load_state(model, result.best_state)
    save_checkpoint(model, out / "model.fcn")
    last = result.curve.rows[-1]
    print(f"trained {len(result.curve)} epochs; final train_acc {last.train_acc:.4f}, "
          f"best valid_acc {result.best_valid_acc:.4f} at epoch {result.best_epoch}")
    print(f"artifacts written to {out}")
    return 0


def _checkpoint_path(cfg: RunConfig) -> Path:
    if "checkpoint" in cfg.paths:
        return Path(cfg.paths["checkpoint"])
    return Path(cfg.paths.get("out", "runs/latest")) / "model.fcn"


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ckpt = _checkpoint_path(cfg)
    model = load_checkpoint(ckpt)
    if "data" not in cfg.paths:
        raise ConfigError("evaluation needs a data root (--data or paths.data)")
    index = scan_dataset(cfg.paths["data"])
    if index.class_count != model.config.num_classes:
        raise VersionError("num_classes", index.class_count, model.config.num_classes)
    manifest = Path(cfg.paths.get("manifest", ckpt.parent / "split.csv"))
    if not manifest.is_file():
        raise DataError(f"split manifest not found: {manifest}")
    split = read_manifest(manifest, index.root)
    part = split.part(args.part)
    store = ImageStore(model.config.input_size, model.dtype)
    report = evaluate(model, part, cfg.train.batch_size, store)
    out = _out_dir(cfg)
    report.write(out)
    m = report.metrics
    print(f"{args.part}: n={m['total']} accuracy {m['accuracy']:.4f} macro_f1 {m['macro']['f1']:.4f} "
          f"macro_auc {report.roc.macro_auc:.4f}")
    return 0


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(_checkpoint_path(cfg))
    image = load_image(args.image, model.config.input_size, model.dtype)
    classes, conf = model.predict(image[None])
    print(f"{model.class_names[int(classes[0])]}\t{float(conf[0]):.6f}")
    return 0


def cmd_summary(args) -> int:
    cfg = resolve_config(args)
    if getattr(args, "checkpoint", None):
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_model(cfg.model, seed=cfg.train.seed)
    print(format_summary(model), end="")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    gc = cfg.gradcheck
    if args.tolerance is not None:
        gc["tolerance"] = args.tolerance
    if args.per_tensor is not None:
        gc["per_tensor"] = args.per_tensor
    model_cfg = dataclasses.replace(cfg.model, input_size=int(gc["input_size"]))
    with tc.precision(np.float64):
        model = build_model(model_cfg, seed=cfg.train.seed)
        images, labels = gradcheck_inputs(model_cfg, int(gc["batch"]), cfg.train.seed)
        report = gradient_check(model, images, labels, int(gc["per_tensor"]), float(gc["eps"]),
                                float(gc["tolerance"]), cfg.train.seed)
    print(f"{'layer':<22}{'type':<22}{'max rel err':>14}")
    for layer, (kind, err) in report.per_layer().items():
        print(f"{layer:<22}{kind:<22}{err:>14.3e}")
    print(f"checked {len(report.entries)} scalars; max relative error {report.max_rel_error:.3e} "
          f"(tolerance {report.tolerance:g})")
    if not report.passed:
        w = report.worst
        print(f"FAIL: worst offender {w.layer} ({w.layer_type}) parameter {w.param}{list(w.index)}: "
              f"analytic {w.analytic:.6e} vs numeric {w.numeric:.6e}", file=sys.stderr)
        return 5
    print("PASS")
    return 0


def cmd_make_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.paths.get("out", "synthetic"))
    generate_synthetic_dataset(args.num_classes, args.per_class, cfg.train.seed, out, size=args.size)
    print(f"wrote {args.num_classes * args.per_class} images in {args.num_classes} classes to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    sup = argparse.SUPPRESS
    g.add_argument("--config", default=sup, help="JSON file of dotted keys, e.g. {\"model.num_classes\": 15}")
    g.add_argument("--set", action="append", default=sup, metavar="KEY=VALUE", help="override one config key")
    g.add_argument("--seed", type=int, default=sup)
    g.add_argument("--out", default=sup, help="output directory")
    g.add_argument("--threads", type=int, default=sup, help="BLAS thread count (default 1)")
    g.add_argument("--f64", action="store_true", default=sup, help="run in 64-bit precision")
    g.add_argument("-v", "--verbose", action="store_true", default=sup)

    parser = argparse.ArgumentParser(prog="fourcropnet", parents=[common], description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="scan, split and train; write checkpoint and curves")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--input-size", type=int)
    p.add_argument("--head", choices=["gap", "flatten"])
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="confusion matrix, metrics and ROC for one partition")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--part", choices=["train", "valid", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="classify one image")
    p.add_argument("--checkpoint")
    p.add_argument("image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("summary", parents=[common], help="layer table and parameter totals")
    p.add_argument("--checkpoint")
    p.add_argument("--input-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--head", choices=["gap", "flatten"])
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--per-tensor", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-synth", parents=[common], help="write a procedural class-per-directory dataset")
    p.add_argument("--num-classes", type=int, default=15)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=64, help="image side length in pixels")
    p.set_defaults(func=cmd_make_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = tc.get_dtype()
    if getattr(args, "f64", False):
        tc.set_dtype(np.float64)
    try:
        with threadpool_limits(limits=getattr(args, "threads", 1)):
            return args.func(args)
    except FourCropNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        tc.set_dtype(previous)


if __name__ == "__main__":
    sys.exit(main())
