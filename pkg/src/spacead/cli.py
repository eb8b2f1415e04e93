"""Command-line interface.

Subcommands: ``synth`` (write a synthetic dataset in the MVTec layout),
``train`` (fit networks, write checkpoint + loss CSV), ``calibrate``
(recompute map-normalization quantiles in a checkpoint), ``score`` (score one
image, export map/heatmap), ``eval`` (metrics report over a test set).

Configuration is a flat ``key = value`` text file (``#`` starts a comment);
unknown keys are rejected.  Exit codes: 0 success, 2 configuration/argument
errors, 1 runtime errors.  The ``SPACE_THREADS`` environment variable caps
worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import torch

from .augment import AugmentSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import ImageSample, _load_png, export_mvtec_layout, load_mvtec_layout, synth_toy_dataset
from .errors import ConfigError, SpaceError
from .metrics import evaluate_split, format_summary, report_rows
from .networks import NetworkConfig
from .scoring import calibrate, score_image, write_heatmap_png, write_spmap
from .trainer import TrainConfig, Trainer

_CONFIG_SECTIONS = (("training", TrainConfig), ("networks", NetworkConfig), ("augmentation", AugmentSpec))
_EXTRA_KEYS = {
    "validation_fraction": (float, 0.1, "fraction of train/good carved off for calibration"),
    "teacher_checkpoint": (str, None, "checkpoint file supplying frozen teacher weights"),
}


def _key_table() -> dict[str, tuple]:
    """Flat config key -> (section name, field type, default)."""
    table: dict[str, tuple] = {}
    for section, cls in _CONFIG_SECTIONS:
        for f in dataclasses.fields(cls):
            if f.name in table:
                raise RuntimeError(f"duplicate config key {f.name}")
            table[f.name] = (section, f.type, f.default)
    for key, (typ, default, _) in _EXTRA_KEYS.items():
        table[key] = ("run", typ, default)
    return table


def _coerce(key: str, raw: str, typ) -> object:
    typ_name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    raw = raw.strip()
    try:
        if typ_name == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ_name == "int":
            return int(raw)
        if typ_name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def parse_config_file(path: str | Path) -> dict[str, object]:
    table = _key_table()
    values: dict[str, object] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in table:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, table[key][1])
    return values


def build_configs(values: dict[str, object]):
    """Split flat config values into the three config objects plus extras."""
    def section_kwargs(cls):
        names = {f.name for f in dataclasses.fields(cls)}
        return {k: v for k, v in values.items() if k in names}

    train_cfg = TrainConfig(**section_kwargs(TrainConfig))
    net_cfg = NetworkConfig(**section_kwargs(NetworkConfig))
    aug_spec = AugmentSpec(**section_kwargs(AugmentSpec))
    extras = {k: values.get(k, default) for k, (typ, default, _) in _EXTRA_KEYS.items()}
    return train_cfg, net_cfg, aug_spec, extras


def _config_help() -> str:
    lines = ["configuration keys (flat `key = value` file, '#' comments):"]
    for section, cls in _CONFIG_SECTIONS:
        lines.append(f"  [{section}]")
        for f in dataclasses.fields(cls):
            lines.append(f"    {f.name} = {f.default}")
    lines.append("  [run]")
    for key, (_, default, help_text) in _EXTRA_KEYS.items():
        lines.append(f"    {key} = {default}  ({help_text})")
    return "\n".join(lines)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_category(data_dir: str, validation_fraction: float):
    base = Path(data_dir)
    if not base.is_dir():
        raise ConfigError(f"data directory not found: {base}")
    return load_mvtec_layout(base.parent, base.name, validation_fraction), base.name


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    split = synth_toy_dataset(
        seed=args.seed,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test_per_class=args.n_test,
        image_size=args.size,
        n_discs=args.discs,
    )
    export_mvtec_layout(split, args.out)
    n = len(split.train) + len(split.validation) + len(split.test)
    print(f"wrote {n} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    train_cfg, net_cfg, aug_spec, extras = build_configs(values)
    data, _ = _load_category(args.data, extras["validation_fraction"])
    teacher = args.teacher or extras["teacher_checkpoint"]
    if teacher:
        _require_file(teacher, "teacher checkpoint")
    trainer = Trainer(train_cfg, net_cfg, aug_spec, data, teacher)
    ckpt = trainer.run(args.out, args.loss_csv)
    print(f"trained {ckpt.iteration} iterations -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    data, _ = _load_category(args.data, args.validation_fraction)
    if ckpt.teacher_stats is None:
        raise ConfigError("checkpoint carries no teacher statistics; train first")
    ckpt.calibration = calibrate(
        ckpt.model, data.validation, ckpt.teacher_stats, ckpt.train_config.student_ema_for_fm
    )
    save_checkpoint(ckpt, args.ckpt)
    print(f"recalibrated {args.ckpt} on {len(data.validation)} validation images")
    return 0


def cmd_score(args) -> int:
    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    pixels = _load_png(_require_file(args.image, "image"))
    sample = ImageSample(pixels, identifier=str(args.image))
    score, _, _, mt = score_image(ckpt, sample)
    if args.map_out:
        write_spmap(mt, args.map_out)
    if args.heatmap_out:
        write_heatmap_png(mt, args.heatmap_out)
    print(repr(score))
    return 0


def cmd_eval(args) -> int:
    import csv as _csv

    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    data, category = _load_category(args.data, args.validation_fraction)
    if not data.test:
        raise ConfigError(f"no test images under {args.data}")
    result = evaluate_split(ckpt, data.test, fpr_limit=args.fpr_limit)

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["category", "images", "image_auroc", "pixel_auroc", "spro"])
        writer.writeheader()
        for row in report_rows(category, result):
            writer.writerow(row)
    scores_path = Path(args.scores) if args.scores else report_path.with_suffix(".scores.csv")
    with open(scores_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["identifier", "label", "score"])
        for identifier, label, score in result.rows:
            writer.writerow([identifier, label, repr(score)])
    print(format_summary(category, result))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spacead",
        description="Train, score and evaluate the spatial-consistency anomaly detector.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic toy dataset in the MVTec layout")
    p.add_argument("--out", required=True, help="category directory to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--n-test", type=int, default=16, help="test images per class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--discs", type=int, default=3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "train",
        help="train networks on a dataset directory",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data", required=True, help="category directory (train/good inside)")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--loss-csv", help="loss log path (default: alongside the checkpoint)")
    p.add_argument("--teacher", help="checkpoint supplying frozen teacher weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="recompute map-normalization quantiles in a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="category directory")
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("score", help="score one image; optionally export map and heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--map-out", help="raw map output file")
    p.add_argument("--heatmap-out", help="heatmap PNG output file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="category directory")
    p.add_argument("--report", required=True, help="report CSV path")
    p.add_argument("--scores", help="per-image score CSV path (default: <report>.scores.csv)")
    p.add_argument("--fpr-limit", type=float, default=0.05)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    threads = os.environ.get("SPACE_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: SPACE_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SpaceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
