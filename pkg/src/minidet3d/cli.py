"""Command-line surface: iou, ingest, synth, train, eval, report.

Every command is deterministic under a fixed seed and fixed inputs, writes
its resolved configuration next to its outputs, and sends diagnostics to
stderr. Exit code 0 means the command completed with zero errors; argparse
failures exit 2. Set MINIDET3D_LOG=debug for verbose logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import data as data_mod
from .errors import ConfigError, MiniDetError
from .geom import Box7
from .iou import iou_3d, monte_carlo_iou
from .losses import LossSchedule
from .metrics import report_csv, report_json
from .model import FusionModel, ModelConfig, load_checkpoint, save_checkpoint
from .train import (
    LOG_HEADER,
    build_training_samples,
    evaluate_model,
    format_log_row,
    run_training,
    split_by_hash,
)

log = logging.getLogger("minidet3d")

_MODEL_DEFAULTS = {
    "d_v": 32,
    "d_t": 32,
    "d_model": 64,
    "n_layers": 2,
    "n_heads": 4,
    "lora_rank": 16,
    "lora_alpha": 32.0,
    "lora_targets": ["q", "k", "v", "o"],
    "seed": 0,
}

_SCHEDULE_DEFAULTS = {
    "transition_epoch": 50,
    "total_epochs": 100,
    "stage1_weights": [1.0, 0.0],
    "stage2_weights": [0.2, 0.8],
    "stage1_lr": 1e-4,
    "stage2_lr": 1e-5,
}

_TRAIN_DEFAULTS = {
    "seed": 0,
    "data": None,
    "val_data": None,
    "val_fraction": 0.1,
    "batch_size": 32,
    "model": _MODEL_DEFAULTS,
    "schedule": _SCHEDULE_DEFAULTS,
}


def _merge_config(defaults: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{where}: unknown config keys {sorted(unknown)}")
    merged = {}
    for key, default in defaults.items():
        value = given.get(key, default)
        if isinstance(default, dict):
            merged[key] = _merge_config(default, value if key in given else {}, f"{where}.{key}")
        else:
            merged[key] = value
    return merged


def _write_resolved_config(config: dict, path: Path) -> None:
    path.write_text(json.dumps(config, indent=1, sort_keys=True), encoding="utf-8")


def _load_dataset(dirpath: str):
    d = Path(dirpath)
    scenes = d / "scenes.json"
    feats = d / "features.json"
    if not scenes.is_file() or not feats.is_file():
        raise ConfigError(f"{dirpath}: expected scenes.json and features.json")
    records = data_mod.ingest(scenes)
    features = data_mod.load_features(feats)
    return build_training_samples(records, features)


# ---- subcommands -------------------------------------------------------------


def cmd_iou(args) -> int:
    a = Box7(*args.box[:7])
    b = Box7(*args.box[7:])
    res = iou_3d(a, b)
    print(f"iou={res.iou!r}")
    print(f"intersection={res.intersection_volume!r}")
    print(f"union={res.union_volume!r}")
    if args.mc_samples:
        mc = monte_carlo_iou(a, b, args.mc_samples, args.mc_seed)
        print(f"mc_iou={mc.iou!r}")
        print(f"mc_se={mc.standard_error!r}")
    return 0


def cmd_ingest(args) -> int:
    records, diagnostics = data_mod.ingest_lenient(args.scenes)
    for diag in diagnostics:
        print(f"rejected: {diag}", file=sys.stderr)

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            processed = list(pool.map(data_mod.process_record, records, chunksize=16))
    else:
        processed = [data_mod.process_record(r) for r in records]

    dropped = 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for sample in processed:
            dropped += sum(1 for a in sample.annotations if not a.retained)
            f.write(json.dumps(data_mod.processed_to_json(sample)) + "\n")

    _write_resolved_config(
        {"command": "ingest", "scenes": args.scenes, "out": args.out, "workers": args.workers},
        out.with_suffix(out.suffix + ".config.json"),
    )
    print(f"accepted={len(records)} rejected={len(diagnostics)} dropped_invisible={dropped}")
    return 1 if diagnostics else 0


def cmd_synth(args) -> int:
    mix = {}
    for part in args.mix.split(","):
        name, _, weight = part.partition("=")
        if not weight:
            raise ConfigError(f"bad mix entry {part!r}, expected name=weight")
        mix[name.strip()] = float(weight)
    config = data_mod.SynthConfig(d_v=args.d_v, d_t=args.d_t, noise_std=args.noise)
    records, features = data_mod.synth_scenes(args.count, mix, args.seed, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_mod.emit(records, out / "scenes.json")
    data_mod.save_features(features, out / "features.json")
    _write_resolved_config(
        {
            "command": "synth",
            "count": args.count,
            "seed": args.seed,
            "mix": mix,
            "noise": args.noise,
            "d_v": args.d_v,
            "d_t": args.d_t,
        },
        out / "resolved_config.json",
    )
    print(f"wrote {len(records)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    given = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = _merge_config(_TRAIN_DEFAULTS, given, "config")
    if not config["data"]:
        raise ConfigError("config.data must point to a dataset directory")

    samples = _load_dataset(config["data"])
    if config["val_data"]:
        train_samples = samples
        val_samples = _load_dataset(config["val_data"])
    else:
        train_samples, val_samples = split_by_hash(samples, config["val_fraction"])

    model_cfg = dict(config["model"])
    model_cfg["lora_targets"] = tuple(model_cfg["lora_targets"])
    model = FusionModel(ModelConfig(**model_cfg))
    schedule = _schedule_from_config(config["schedule"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(config, out / "resolved_config.json")
    print(f"trainable_fraction={model.trainable_fraction()!r}")
    print(f"train_samples={len(train_samples)} val_samples={len(val_samples)}")

    rows = [LOG_HEADER]
    history = run_training(
        model,
        train_samples,
        schedule,
        seed=config["seed"],
        batch_size=config["batch_size"],
        val_samples=val_samples or None,
        epoch_callback=lambda s: rows.append(format_log_row(s)),
    )
    (out / "train_log.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    save_checkpoint(model, out / "checkpoint.bin")
    print(f"final_loss={history[-1].combined_loss!r}")
    return 0


def _schedule_from_config(cfg: dict) -> LossSchedule:
    return LossSchedule(
        transition_epoch=cfg["transition_epoch"],
        total_epochs=cfg["total_epochs"],
        stage1_weights=tuple(cfg["stage1_weights"]),
        stage2_weights=tuple(cfg["stage2_weights"]),
        stage1_lr=cfg["stage1_lr"],
        stage2_lr=cfg["stage2_lr"],
    )


def cmd_eval(args) -> int:
    samples = _load_dataset(args.data)
    if args.gt_as_pred:
        model = None
        predictions = [s.gt_box for s in samples]
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint required unless --gt-as-pred")
        model = load_checkpoint(args.checkpoint)
        predictions = None
    report = evaluate_model(model, samples, args.threshold, predictions=predictions)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(report) + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    _write_resolved_config(
        {
            "command": "eval",
            "checkpoint": args.checkpoint,
            "data": args.data,
            "threshold": args.threshold,
            "gt_as_pred": args.gt_as_pred,
        },
        out / "resolved_config.json",
    )
    print(f"miou_samples={report['miou_samples']!r}")
    print(f"miou_categories={report['miou_categories']!r}")
    print(f"recall={report['recall']!r}")
    return 0


def cmd_report(args) -> int:
    report = json.loads(Path(args.report).read_text(encoding="utf-8"))
    if args.csv:
        print(report_csv(report), end="")
        return 0
    width = max([len("category")] + [len(r["category"]) for r in report["categories"]])
    print(f"{'category':<{width}}  {'iou':>8}  count")
    for row in report["categories"]:
        print(f"{row['category']:<{width}}  {row['iou']:>8.4f}  {row['count']}")
    print(f"{'mIoU (categories)':<{width}}  {report['miou_categories']:>8.4f}")
    print(f"{'mIoU (samples)':<{width}}  {report['miou_samples']:>8.4f}")
    for key in ("accuracy", "precision", "recall", "f1"):
        print(f"{key:<{width}}  {report[key]:>8.4f}")
    return 0


# ---- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minidet3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("iou", help="IoU of two boxes given as 14 numbers")
    p.add_argument("box", type=float, nargs=14, metavar="N",
                   help="x y z l w h yaw for box A, then box B")
    p.add_argument("--mc-samples", type=int, default=0,
                   help="also run the Monte-Carlo cross-check with this many samples")
    p.add_argument("--mc-seed", type=int, default=0)
    p.set_defaults(func=cmd_iou)

    p = sub.add_parser("ingest", help="validate scenes and run the preprocessing pipeline")
    p.add_argument("scenes", help="scene JSON file")
    p.add_argument("--out", required=True, help="output JSON-lines file of processed samples")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mix", default="adult=0.5,car=0.5", help="category=weight, comma separated")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--d-v", type=int, default=32)
    p.add_argument("--d-t", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-as-pred", action="store_true",
                   help="oracle mode: evaluate ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="pretty-print an eval report.json")
    p.add_argument("report")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    if os.environ.get("MINIDET3D_LOG"):
        logging.basicConfig(level=os.environ["MINIDET3D_LOG"].upper())
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MiniDetError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
