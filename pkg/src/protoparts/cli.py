"""Command-line entry point: ``protoparts <command> [--config c.json] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command writes
``resolved-config.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import BackboneConfig
from .baseline import BaselineNet, baseline_train
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .data import DatasetManifest, augment_set, load_dataset, synth_dataset, whiten_batch
from .embedding import EmbeddingConfig, activation_vectors, embed, knn_purity, plot_embedding, write_embedding_csv
from .explain import explain
from .metrics import weighted_metrics
from .prototypes import ProtoPNet, prototype_diversity
from .training import TrainConfig, fit, push_prototypes

log = logging.getLogger("protoparts")

SECTIONS = ("data", "backbone", "train", "embedding")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with data/backbone/train/embedding sections")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")

    parser = _Parser(prog="protoparts", description="Prototypical-part classifier toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic patch dataset into --out")

    for name, text in (("train", "full staged schedule"), ("train-baseline", "plain CNN baseline")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("push", parents=[common], help="project prototypes onto the train split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="metrics and predictions for one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("explain", parents=[common], help="explanation report for one image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("embed", parents=[common], help="3-D embedding of prototype activations")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("inspect", parents=[common], help="print a checkpoint header")
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def resolve_config(args) -> dict:
    cfg = {"seed": 0, "per_class": 10}
    if args.config is not None:
        user = json.loads(args.config.read_text())
        unknown = set(user) - set(SECTIONS) - {"seed", "per_class"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    seed = cfg["seed"]
    data = DatasetManifest(**{**cfg.get("data", {}), "seed": seed})
    train = TrainConfig(**{**cfg.get("train", {}), "seed": seed})
    emb = EmbeddingConfig(**{**cfg.get("embedding", {}), "seed": seed})
    return {
        "command": args.command,
        "seed": seed,
        "per_class": cfg["per_class"],
        "data": data.to_dict(),
        "backbone": BackboneConfig(**cfg.get("backbone", {})).to_dict(),
        "train": train.to_dict(),
        "embedding": emb.to_dict(),
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in sorted(vars(args).items())},
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(path: Path, class_names):
    ds = load_dataset(path)
    if class_names is not None and list(class_names) != list(ds.manifest.classes):
        raise ValueError(f"class mismatch: checkpoint {class_names} vs dataset {ds.manifest.classes}")
    return ds


def _check_stats(model, ds) -> None:
    if model.stats is None:
        return
    if not (np.array_equal(model.stats.mean, ds.stats.mean) and np.array_equal(model.stats.std, ds.stats.std)):
        raise ValueError("dataset normalization stats differ from the checkpoint's")


def cmd_synth(cfg, args) -> None:
    ds = synth_dataset(DatasetManifest(**cfg["data"]), cfg["seed"], args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test patches to {args.out}")


def cmd_train(cfg, args) -> None:
    ds = _load_data(args.data, None)
    train = augment_set(ds.train, ds.manifest.augmentation_factor, cfg["seed"])
    model = ProtoPNet.create(BackboneConfig(**cfg["backbone"]), ds.manifest.classes,
                             cfg["per_class"], cfg["seed"], ds.stats)
    history_path = args.out / "history.jsonl"
    history_path.unlink(missing_ok=True)
    fit(model, train, TrainConfig(**cfg["train"]), ds.stats, val=ds.test, push_set=ds.train,
        history_path=history_path)
    save_checkpoint(model, args.out / "model.ppks")
    summary = {k: model.metadata[k] for k in ("prototype_diversity", "pre_push_val_acc", "final_val_acc")}
    _write_json(args.out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_train_baseline(cfg, args) -> None:
    ds = _load_data(args.data, None)
    train = augment_set(ds.train, ds.manifest.augmentation_factor, cfg["seed"])
    model = BaselineNet.create(BackboneConfig(**cfg["backbone"]), ds.manifest.classes, cfg["seed"], ds.stats)
    history_path = args.out / "history.jsonl"
    history_path.unlink(missing_ok=True)
    baseline_train(model, train, TrainConfig(**cfg["train"]), ds.stats, val=ds.test, history_path=history_path)
    save_checkpoint(model, args.out / "baseline.ppks")
    _write_json(args.out / "summary.json", {"final_val_acc": model.metadata["final_val_acc"]})


def _protopnet(path: Path) -> ProtoPNet:
    model = load_checkpoint(path)
    if not isinstance(model, ProtoPNet):
        raise ValueError(f"{path} is not a prototype-network checkpoint")
    return model


def cmd_push(cfg, args) -> None:
    model = _protopnet(args.checkpoint)
    ds = _load_data(args.data, model.class_names)
    _check_stats(model, ds)
    push_prototypes(model, ds.train, ds.stats)
    model.metadata["prototype_diversity"] = prototype_diversity(model.prototypes)
    save_checkpoint(model, args.out / "model.ppks")
    print(f"prototype_diversity {model.metadata['prototype_diversity']:.6g}")


def cmd_eval(cfg, args) -> None:
    model = load_checkpoint(args.checkpoint)
    ds = _load_data(args.data, model.class_names)
    _check_stats(model, ds)
    ps = ds.train if args.split == "train" else ds.test
    preds, lg = model.predict(whiten_batch(ps.images, ds.stats))
    report = weighted_metrics(ps.labels, preds, len(model.class_names))
    _write_json(args.out / "metrics.json", report.to_json(model.class_names))
    with open(args.out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "true", "pred", "max_logit"])
        for pid, t, p, row in zip(ps.ids, ps.labels, preds, lg):
            w.writerow([pid, model.class_names[t], model.class_names[p], f"{row.max():.6g}"])
    print(f"accuracy {report.accuracy:.4f}  weighted F1 {report.weighted_f1:.4f}")


def cmd_explain(cfg, args) -> None:
    model = _protopnet(args.checkpoint)
    with Image.open(args.image) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.uint8)
    report = explain(model, img, k=args.k, input_id=args.image.stem, out_dir=args.out)
    print(f"{args.image.stem}: predicted {report.predicted_name}")


def cmd_embed(cfg, args) -> None:
    model = _protopnet(args.checkpoint)
    ds = _load_data(args.data, model.class_names)
    _check_stats(model, ds)
    ps = ds.train if args.split == "train" else ds.test
    emb_cfg = EmbeddingConfig(**cfg["embedding"])
    coords = embed(activation_vectors(model, ps.images, ds.stats), emb_cfg)
    names = [model.class_names[k] for k in ps.labels]
    write_embedding_csv(args.out / "embedding.csv", coords, names, [args.split] * len(ps), ps.ids)
    plot_embedding(args.out / "embedding.png", coords, names, model.class_names)
    purity = knn_purity(coords, ps.labels, k=10)
    _write_json(args.out / "embedding.json", {"knn_purity": float(f"{purity:.6g}"), "points": len(ps)})
    print(f"knn purity {purity:.4f}")


def cmd_inspect(cfg, args) -> None:
    header, _ = read_header(args.checkpoint.read_bytes())
    print(json.dumps(header, indent=2, sort_keys=True))


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "train-baseline": cmd_train_baseline, "push": cmd_push,
    "eval": cmd_eval, "explain": cmd_explain, "embed": cmd_embed, "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (TypeError, ValueError, OSError) as exc:  # malformed config file
        print(f"protoparts: bad configuration: {exc}", file=sys.stderr)
        return 1
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / "resolved-config.json", cfg)
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"protoparts {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
