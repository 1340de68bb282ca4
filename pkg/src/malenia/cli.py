"""Command-line interface: dataset generation, training, inference, evaluation."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attributes import load_bank, save_bank
from .errors import ConfigError, FormatError, MaleniaError
from .phantom import (
    LESION_CLASSES,
    generate_dataset,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)
from .pipeline import (
    Config,
    evaluate,
    export_bank,
    infer,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)


def _load_dataset(data_dir: Path):
    manifest = read_manifest(data_dir / "manifest.json")
    return [read_volume(data_dir / entry["file"]) for entry in manifest]


def _cmd_gen_data(args) -> int:
    classes = args.classes.split(",") if args.classes else list(LESION_CLASSES)
    unknown = set(classes) - set(LESION_CLASSES)
    if unknown:
        raise ConfigError(f"unknown lesion classes: {sorted(unknown)}")
    shape = tuple(int(s) for s in args.shape.split(","))
    samples = generate_dataset(classes, args.per_class, args.seed, shape=shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        name = f"sample_{i:05d}.mlna"
        write_volume(sample, out / name)
        entries.append({"file": name, "classes": sorted(sample.classes)})
    write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(samples)} volumes to {out}")
    return 0


def _cmd_train(args) -> int:
    config = Config.from_file(args.config) if args.config else Config()
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.seed is not None:
        config.seed = args.seed
    train_set = _load_dataset(Path(args.data))
    result = train(
        config,
        train_set,
        log=lambda rec: print(
            f"epoch {rec['epoch']:4d}  lr {rec['lr']:.2e}  total {rec['total']:.4f}  "
            f"deep {rec['deep']:.4f}  sim {rec['sim']:.4f}  seg {rec['seg']:.4f}"
        ),
    )
    save_checkpoint(result.checkpoint_payload(), args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def _load_model_and_bank(args):
    payload = load_checkpoint(args.checkpoint)
    model, config = model_from_checkpoint(payload)
    if getattr(args, "bank", None):
        bank = load_bank(args.bank, expected_schema_hash=model.schema.hash())
    else:
        bank = export_bank(payload)
    return model, config, bank


def _infer_volume(args):
    model, config, bank = _load_model_and_bank(args)
    sample = read_volume(args.volume)
    return infer(model, sample.volume.data, bank, config=config), sample


def _cmd_infer(args) -> int:
    result, _ = _infer_volume(args)
    report = {
        "foreground_tokens": result.foreground_tokens,
        "lesions": [
            {
                "token": l["token"],
                "voxels": int(l["mask"].sum()),
                "attributes": l["attributes"],
                "disease": [[name, score] for name, score in l["disease"]],
            }
            for l in result.lesions
        ],
    }
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        if args.mask_out:
            np.save(args.mask_out, result.segmentation.astype(np.uint8))
    print(text)
    return 0


def _cmd_match_attributes(args) -> int:
    result, _ = _infer_volume(args)
    if not result.lesions:
        print("no foreground lesions detected")
        return 0
    for lesion in result.lesions:
        print(f"token {lesion['token']} ({int(lesion['mask'].sum())} voxels)")
        for aspect, value in lesion["attributes"].items():
            print(f"  {aspect}: {value}")
        best, score = lesion["disease"][0]
        print(f"  best disease match: {best} (score {score}/8)")
    return 0


def _cmd_eval(args) -> int:
    model, config, bank = _load_model_and_bank(args)
    test_set = _load_dataset(Path(args.data))
    zero_shot = args.zero_shot.split(",") if args.zero_shot else []
    report = evaluate(model, test_set, bank, config=config,
                      zero_shot_classes=zero_shot)
    print(report.to_text())
    if args.out:
        report.save(args.out)
        print(f"wrote report to {args.out}")
    return 0


def _cmd_export_bank(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    bank = export_bank(payload)
    save_bank(bank, args.out)
    print(f"wrote {bank.num_descriptions} description embeddings to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="malenia",
        description="Zero-shot 3D lesion segmentation on synthetic phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--classes", default="", help="comma-separated class names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="32,32,32")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="segment one volume and rank diseases")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--bank", help="external embedding bank (default: checkpoint)")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--mask-out", help="save the union segmentation as .npy")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bank")
    p.add_argument("--zero-shot", default="", help="classes to flag as zero-shot")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("match-attributes",
                       help="print per-lesion attribute assignments")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--bank")
    p.set_defaults(func=_cmd_match_attributes)

    p = sub.add_parser("export-bank", help="write the frozen embedding bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_bank)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MaleniaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
