"""Command-line surface.

Subcommands: scan, train, finetune, evaluate, compare, schedule, synth.
Config files are flat key=value lines with # comments; command-line flags
override file values, unknown keys are hard errors, and every effective
value is echoed to the run log and written to the run manifest (itself a
valid config file, so a run can be re-executed from its manifest alone).

Exit codes: 0 ok, 2 bad arguments/config, 3 dataset or checkpoint error,
4 training aborted on a non-finite loss.
"""

import argparse
import os
import sys

from . import data as data_mod
from . import metrics as metrics_mod
from .checkpoint import load_checkpoint, model_from_checkpoint
from .errors import LeafnetError, NonFiniteLoss
from .models import HeadSpec, attach_head, build_backbone, set_trainable, strip_head
from .optim import CosineSchedule, cosine_lr
from .training import (
    AugmentConfig,
    CosineParams,
    PlateauParams,
    TrainConfig,
    evaluate,
    train,
    write_history_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ABORTED = 4

PRESET_IMAGE_SIZE = {"mini": 32, "resnet50": 224}

# every key accepted in a config file, with its parser
_CONFIG_KEYS = {
    "preset": str,
    "image_size": int,
    "classes": int,
    "max_epochs": int,
    "batch_size": int,
    "val_fraction": float,
    "early_stop_patience": int,
    "restore_best": lambda v: v.lower() in ("1", "true", "yes"),
    "optimizer": str,
    "base_lr": float,
    "momentum": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "plateau_enabled": lambda v: v.lower() in ("1", "true", "yes"),
    "plateau_factor": float,
    "plateau_patience": int,
    "plateau_min_lr": float,
    "cosine_enabled": lambda v: v.lower() in ("1", "true", "yes"),
    "cosine_lr_min": float,
    "cosine_total_steps": int,
    "seed": int,
    "dtype": str,
    "shuffle": lambda v: v.lower() in ("1", "true", "yes"),
    "augment_enabled": lambda v: v.lower() in ("1", "true", "yes"),
    "rotation_deg": float,
    "flip_prob": float,
    "zoom_min": float,
    "zoom_max": float,
    "contrast_min": float,
    "contrast_max": float,
    "unfreeze_last": int,
}


class ConfigError(LeafnetError):
    pass


def parse_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _CONFIG_KEYS[key](val)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


def effective_config(args, file_values):
    """defaults <- config file <- explicit CLI flags."""
    cfg = {
        "preset": "mini",
        "image_size": None,
        "classes": None,
        "max_epochs": 20,
        "batch_size": 32,
        "val_fraction": 0.2,
        "early_stop_patience": 5,
        "restore_best": True,
        "optimizer": "adam_like",
        "base_lr": 1e-3,
        "momentum": 0.9,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "plateau_enabled": True,
        "plateau_factor": 0.1,
        "plateau_patience": 3,
        "plateau_min_lr": 1e-6,
        "cosine_enabled": True,
        "cosine_lr_min": 0.0,
        "cosine_total_steps": 0,
        "seed": 0,
        "dtype": "f32",
        "shuffle": True,
        "augment_enabled": True,
        "rotation_deg": 20.0,
        "flip_prob": 0.5,
        "zoom_min": 0.8,
        "zoom_max": 1.2,
        "contrast_min": 0.8,
        "contrast_max": 1.2,
        "unfreeze_last": 0,
    }
    cfg.update(file_values)
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    if cfg["image_size"] is None:
        cfg["image_size"] = PRESET_IMAGE_SIZE.get(cfg["preset"], 32)
    return cfg


def train_config_from(cfg, max_epochs=None, base_lr=None):
    return TrainConfig(
        max_epochs=max_epochs if max_epochs is not None else cfg["max_epochs"],
        batch_size=cfg["batch_size"],
        val_fraction=cfg["val_fraction"],
        early_stop_patience=cfg["early_stop_patience"],
        restore_best=cfg["restore_best"],
        optimizer=cfg["optimizer"],
        base_lr=base_lr if base_lr is not None else cfg["base_lr"],
        momentum=cfg["momentum"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        eps=cfg["eps"],
        plateau=PlateauParams(
            enabled=cfg["plateau_enabled"],
            factor=cfg["plateau_factor"],
            patience=cfg["plateau_patience"],
            min_lr=cfg["plateau_min_lr"],
        ),
        cosine=CosineParams(
            enabled=cfg["cosine_enabled"],
            lr_min=cfg["cosine_lr_min"],
            total_steps=cfg["cosine_total_steps"] or None,
        ),
        seed=cfg["seed"],
        dtype=cfg["dtype"],
        shuffle=cfg["shuffle"],
        augment=AugmentConfig(
            rotation_deg=cfg["rotation_deg"],
            flip_prob=cfg["flip_prob"],
            zoom_range=(cfg["zoom_min"], cfg["zoom_max"]),
            contrast_range=(cfg["contrast_min"], cfg["contrast_max"]),
            enabled=cfg["augment_enabled"],
        ),
    )


def write_manifest(cfg, path, extra=None):
    with open(path, "w") as fh:
        fh.write("# leafnet run manifest (valid --config input)\n")
        for key in sorted(cfg):
            if cfg[key] is None:
                continue
            val = cfg[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            fh.write(f"{key}={val}\n")
        if extra:
            for k, v in extra.items():
                fh.write(f"# {k}: {v}\n")


def echo_config(cfg):
    for key in sorted(cfg):
        print(f"  {key} = {cfg[key]}")


def _sibling(out_path, suffix):
    base, _ = os.path.splitext(out_path)
    return base + suffix


def cmd_scan(args):
    manifest = data_mod.scan_dataset(args.data)
    print(f"classes ({len(manifest.class_names)}):")
    for i, name in enumerate(manifest.class_names):
        row = {s: manifest.counts[s][i] for s in manifest.counts}
        print(f"  [{i:3d}] {name}: {row}")
    if manifest.skipped:
        print(f"skipped {len(manifest.skipped)} non-image entries:")
        for p in manifest.skipped:
            print(f"  {p}")
    return EXIT_OK


def _load_train_dataset(cfg, data_dir):
    size = (cfg["image_size"], cfg["image_size"])
    return data_mod.load_split(data_dir, "train", size)


def cmd_train(args):
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = effective_config(args, file_values)
    print("effective configuration:")
    echo_config(cfg)
    dataset = _load_train_dataset(cfg, args.data)
    if cfg["classes"] is None:
        cfg["classes"] = len(dataset.class_names)
    model = build_backbone(
        cfg["preset"],
        (3, cfg["image_size"], cfg["image_size"]),
        seed=cfg["seed"],
        dtype=cfg["dtype"],
    )
    attach_head(model, HeadSpec(classes=cfg["classes"]), seed=cfg["seed"])
    tc = train_config_from(cfg)
    result = train(model, dataset, tc, checkpoint_path=args.out)
    write_history_csv(result.history, _sibling(args.out, ".history.csv"))
    write_manifest(cfg, _sibling(args.out, ".manifest"), extra={"data": args.data})
    last = result.history[-1] if result.history else None
    if last:
        print(
            f"done: {len(result.history)} epochs, "
            f"best val_loss {min(r.val_loss for r in result.history):.4f}, "
            f"final val_acc {last.val_acc:.4f}"
        )
    else:
        print("done: no epochs ran (max_epochs=0)")
    return EXIT_OK


def cmd_finetune(args):
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = effective_config(args, file_values)
    ckpt = load_checkpoint(args.base)
    model = model_from_checkpoint(ckpt)
    strip_head(model)
    classes = args.head if args.head is not None else cfg["classes"]
    if classes is None:
        print("error: --head K (target class count) is required", file=sys.stderr)
        return EXIT_USAGE
    cfg["classes"] = classes
    attach_head(model, HeadSpec(classes=classes), seed=cfg["seed"])
    head_groups = sum(1 for g in model.parameter_groups() if g.in_head)
    backbone_groups = sum(1 for g in model.parameter_groups() if not g.in_head)
    k = cfg["unfreeze_last"]
    if k < 0 or k > backbone_groups:
        print(
            f"error: --unfreeze-last must lie in [0, {backbone_groups}]",
            file=sys.stderr,
        )
        return EXIT_USAGE
    # k counts backbone groups beyond the always-trainable head
    set_trainable(model, "unfreeze_last_k", k=k + head_groups)
    # fine-tune preset defaults: 12-epoch cap and the small rate, unless
    # the user set them explicitly
    if args.max_epochs is None and "max_epochs" not in file_values:
        cfg["max_epochs"] = 12
    if args.base_lr is None and "base_lr" not in file_values:
        cfg["base_lr"] = 1e-4
    print("effective configuration:")
    echo_config(cfg)
    dataset = _load_train_dataset(cfg, args.data)
    tc = train_config_from(cfg)
    result = train(model, dataset, tc, checkpoint_path=args.out)
    write_history_csv(result.history, _sibling(args.out, ".history.csv"))
    write_manifest(cfg, _sibling(args.out, ".manifest"), extra={"data": args.data, "base": args.base})
    if result.history:
        print(
            f"done: {len(result.history)} epochs, "
            f"best val_loss {min(r.val_loss for r in result.history):.4f}"
        )
    return EXIT_OK


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    size = model.input_spec[1]
    dataset = data_mod.load_split(args.data, args.split, (size, size))
    report = evaluate(model, dataset, model_id=os.path.basename(args.ckpt))
    with open(args.report, "w") as fh:
        fh.write(report.to_json())
    o = report.overall
    print(
        f"{report.model_id}: accuracy={o['accuracy']:.4f} "
        f"precision={o['precision_w']:.4f} recall={o['recall_w']:.4f} "
        f"f1={o['f1_w']:.4f} auc={o['auc_w'] if o['auc_w'] is not None else 'n/a'}"
    )
    return EXIT_OK


def cmd_compare(args):
    reports = []
    for path in args.reports:
        with open(path) as fh:
            reports.append(metrics_mod.report_from_json(fh.read()))
    table = metrics_mod.render_comparison(reports)
    print(table)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(metrics_mod.comparison_csv(reports))
    return EXIT_OK


def cmd_schedule(args):
    sched = CosineSchedule(args.lr0, args.min_lr, args.steps)
    lines = ["step,lr"]
    for t in range(args.steps + 1):
        lines.append(f"{t},{cosine_lr(sched, t):.12g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_synth(args):
    ds = data_mod.synth_dataset(
        args.classes, args.per_class, (args.size, args.size),
        seed=args.seed, noise=args.noise, phase=args.phase,
    )
    data_mod.write_dataset_tree(ds, args.out, split=args.split)
    print(
        f"wrote {len(ds.images)} images ({args.classes} classes x "
        f"{args.per_class}) under {args.out}/{args.split}/"
    )
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="leafnet",
        description="Residual-CNN training toolkit: train, fine-tune, evaluate, compare.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("scan", help="index a dataset tree and print the manifest")
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_scan)

    def add_common_train_flags(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--preset", choices=["mini", "resnet50"], default=None)
        sp.add_argument("--image-size", dest="image_size", type=int, default=None)
        sp.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
        sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        sp.add_argument("--base-lr", dest="base_lr", type=float, default=None)
        sp.add_argument("--dtype", choices=["f32", "f64"], default=None)
        sp.add_argument(
            "--no-augment", dest="augment_enabled", action="store_const",
            const=False, default=None,
        )

    sp = sub.add_parser("train", help="train from random init")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint output path")
    sp.add_argument("--classes", type=int, default=None)
    add_common_train_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune from a base checkpoint")
    sp.add_argument("--base", required=True, help="base checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument(
        "--unfreeze-last", dest="unfreeze_last", type=int, default=None,
        help="backbone parameter groups to unfreeze beyond the head (0 = head only)",
    )
    sp.add_argument("--head", type=int, default=None, help="target class count")
    add_common_train_flags(sp)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a test split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True, help="output report JSON")
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("compare", help="render a comparison table from report JSONs")
    sp.add_argument("--reports", nargs="+", required=True)
    sp.add_argument("--csv", default=None, help="also write the table as CSV")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("schedule", help="dump the cosine lr schedule as CSV")
    sp.add_argument("--lr0", type=float, required=True)
    sp.add_argument("--min-lr", dest="min_lr", type=float, default=0.0)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_schedule)

    sp = sub.add_parser("synth", help="generate a synthetic PDIMG dataset tree")
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--per-class", dest="per_class", type=int, required=True)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=0.08)
    sp.add_argument("--phase", type=float, default=0.0)
    sp.set_defaults(fn=cmd_synth)

    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except LeafnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
