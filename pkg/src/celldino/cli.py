"""Command-line entry point.

Subcommands mirror the pipeline stages: gen-data, pretrain, embed,
train-head, crossval, report. Every run directory receives the resolved
configuration plus the tool version; logs go to stderr, artifacts to
--out. Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import ChannelMapSpec
from .binio import FormatError, canonical_json
from .data import SynthSpec, generate_synthetic_dataset, labels_to_matrix, load_manifest
from .dino import DINO_MAGIC, DinoConfig, load_dino, pretrain, save_dino
from .embed import extract_embeddings, load_embeddings, save_embeddings
from .evaluate import (
    crossval_run,
    holdout_split_ids,
    load_report,
    render_error_bar_svg,
    render_table,
    save_report,
)
from .head import HeadConfig, apply_standardizer, fit_standardizer, save_head, train_head
from .vit import ViTConfig, load_vit


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad usage is a user error, not an internal one
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def log(msg: str):
    print(msg, file=sys.stderr)


def _prepare_out_dir(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise UserError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_runconfig(out_dir: Path, command: str, resolved: dict):
    payload = {"tool": "celldino", "version": __version__, "command": command, **resolved}
    (out_dir / "runconfig.json").write_bytes(canonical_json(payload) + b"\n")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UserError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise UserError(f"config file is not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise UserError("config file must hold a JSON object")
    return obj


def _dataclass_from(obj: dict, cls, what: str):
    try:
        return cls(**obj)
    except TypeError as exc:
        raise UserError(f"bad {what} config: {exc}")
    except ValueError as exc:
        raise UserError(f"bad {what} config: {exc}")


def _tupled(obj: dict, keys: tuple[str, ...]) -> dict:
    out = dict(obj)
    for key in keys:
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = _dataclass_from(
        {
            "n_images": args.n,
            "classes": args.classes,
            "seed": args.seed,
            "height": args.height,
            "width": args.width,
            "multi_label_p": args.multi_label_p,
        },
        SynthSpec,
        "generator",
    )
    out_dir = _prepare_out_dir(args.out, args.force)
    manifest = generate_synthetic_dataset(spec, out_dir)
    _write_runconfig(out_dir, "gen-data", {"generator": spec.__dict__})
    log(f"wrote {len(manifest)} images and manifest.json to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config_file(args.config)
    dataset_path = args.dataset or cfg.get("dataset")
    if dataset_path is None:
        raise UserError("no dataset given (flag --dataset or config key 'dataset')")
    if not Path(dataset_path).exists():
        raise UserError(f"dataset manifest not found: {dataset_path}")
    vit_config = _dataclass_from(cfg.get("vit", {}), ViTConfig, "vit")
    dino_obj = _tupled(
        cfg.get("dino", {}), ("global_scale", "local_scale", "protein_rescale_range")
    )
    if args.epochs is not None:
        dino_obj["epochs"] = args.epochs
    dino_config = _dataclass_from(dino_obj, DinoConfig, "dino")
    split_seed = args.split_seed if args.split_seed is not None else cfg.get("split_seed", 0)

    manifest = load_manifest(dataset_path)
    resume = None
    if args.resume:
        resume = load_dino(args.resume)
        log(f"resuming from {args.resume} at epoch {resume.epoch}, step {resume.step}")
    out_dir = _prepare_out_dir(args.out, args.force or args.resume is not None)
    _write_runconfig(
        out_dir,
        "pretrain",
        {
            "dataset": str(dataset_path),
            "vit": vit_config.__dict__,
            "dino": _config_json(dino_config),
            "split_seed": split_seed,
        },
    )

    log_path = out_dir / "train_log.jsonl"
    mode = "a" if resume is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log_file:

        def on_epoch(record, state):
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            log(
                f"epoch {record['epoch']}: loss {record['mean_loss']:.4f} "
                f"teacher entropy {record['teacher_entropy']:.3f}"
            )

        state, _ = pretrain(
            manifest, vit_config, dino_config, split_seed, resume=resume, on_epoch=on_epoch
        )
    save_dino(out_dir / "dino.ckpt", state)
    log(f"checkpoint written to {out_dir / 'dino.ckpt'}")
    return 0


def _config_json(config) -> dict:
    obj = dict(config.__dict__)
    for k, v in obj.items():
        if isinstance(v, tuple):
            obj[k] = list(v)
    return obj


def _load_backbone(path: str):
    """A backbone source: a self-distillation checkpoint (teacher side) or
    a plain backbone checkpoint."""
    p = Path(path)
    if not p.exists():
        raise UserError(f"backbone checkpoint not found: {p}")
    with open(p, "rb") as f:
        magic = f.read(4)
    if magic == DINO_MAGIC:
        state = load_dino(p)
        return state.teacher, {"weights": "dino-pretrained", "dino_epochs": state.epoch}
    return load_vit(p), {"weights": "random-init", "dino_epochs": 0}


def cmd_embed(args) -> int:
    manifest = load_manifest(args.dataset)
    backbone, origin = _load_backbone(args.backbone)
    model = f"vit-{backbone.config.embed_dim}/{backbone.config.patch_size}"
    if args.adapter == "replicate":
        adapter = "replicate"
        adapter_cfg = {"adapter": "replicate"}
    else:
        dst = args.dst_channels or backbone.config.in_channels
        if args.map:
            adapter = ChannelMapSpec.parse(args.map, dst, manifest.channels)
        else:
            if dst != len(manifest.channels):
                raise UserError(
                    f"backbone expects {dst} channels, dataset has {len(manifest.channels)}; "
                    "provide explicit --map entries"
                )
            adapter = ChannelMapSpec.identity(dst)
        adapter_cfg = {
            "adapter": "map",
            "dst_channels": dst,
            "map": [list(a) for a in adapter.assignments],
        }
    if args.weights_label:
        origin["weights"] = args.weights_label
    out_dir = _prepare_out_dir(args.out, args.force)
    emb = extract_embeddings(
        manifest, backbone, adapter, extra_provenance={**origin, "model": model}
    )
    save_embeddings(out_dir / "embeddings.emb", emb)
    _write_runconfig(
        out_dir,
        "embed",
        {
            "dataset": str(args.dataset),
            "backbone": str(args.backbone),
            **adapter_cfg,
            "weights": origin["weights"],
        },
    )
    log(f"embedded {emb.n} images at dimension {emb.dim} -> {out_dir / 'embeddings.emb'}")
    return 0


def _head_config(args, n_classes: int) -> HeadConfig:
    obj = _tupled(_load_config_file(args.config).get("head", {}), ("hidden",))
    obj.setdefault("n_classes", n_classes)
    for flag in ("epochs", "lr", "batch_size", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            obj[flag] = value
    return _dataclass_from(obj, HeadConfig, "head")


def cmd_train_head(args) -> int:
    manifest = load_manifest(args.dataset)
    emb = load_embeddings(args.embeddings)
    labels = labels_to_matrix(manifest, grade_threshold=args.grade_threshold)
    if emb.image_ids != [r.image_id for r in manifest.records]:
        raise UserError("embedding rows do not line up with the manifest records")
    config = _head_config(args, len(manifest.classes))
    train_ids, test_ids = holdout_split_ids(emb.image_ids, args.split_seed)
    row_of = {i: k for k, i in enumerate(emb.image_ids)}
    train_idx = np.array([row_of[i] for i in train_ids])
    val_cut = max(1, int(0.1 * len(train_idx)))
    val_idx, fit_idx = train_idx[:val_cut], train_idx[val_cut:]
    stats = fit_standardizer(emb.matrix[fit_idx])
    out_dir = _prepare_out_dir(args.out, args.force)
    params, logs = train_head(
        apply_standardizer(stats, emb.matrix[fit_idx]),
        labels[fit_idx],
        apply_standardizer(stats, emb.matrix[val_idx]),
        labels[val_idx],
        config,
    )
    save_head(out_dir / "head.bin", params, stats, config)
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as f:
        for record in logs:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    _write_runconfig(
        out_dir,
        "train-head",
        {
            "dataset": str(args.dataset),
            "embeddings": str(args.embeddings),
            "head": _config_json(config),
            "split_seed": args.split_seed,
            "grade_threshold": args.grade_threshold,
        },
    )
    log(f"final val macro-F1: {logs[-1].get('val_macro_f1', float('nan')):.4f}")
    return 0


def cmd_crossval(args) -> int:
    manifest = load_manifest(args.dataset)
    emb = load_embeddings(args.embeddings)
    if emb.image_ids != [r.image_id for r in manifest.records]:
        raise UserError("embedding rows do not line up with the manifest records")
    labels = labels_to_matrix(manifest, grade_threshold=args.grade_threshold)
    config = _head_config(args, len(manifest.classes))
    split = holdout_split_ids(emb.image_ids, args.split_seed)
    report = crossval_run(emb, labels, split, config, k=args.k, fold_seed=args.fold_seed)
    out_dir = _prepare_out_dir(args.out, args.force)
    save_report(out_dir / "report.json", report)
    table = render_table([report])
    (out_dir / "table.txt").write_text(table, encoding="utf-8")
    (out_dir / "chart.svg").write_text(render_error_bar_svg([report]), encoding="utf-8")
    _write_runconfig(
        out_dir,
        "crossval",
        {
            "dataset": str(args.dataset),
            "embeddings": str(args.embeddings),
            "head": _config_json(config),
            "split_seed": args.split_seed,
            "fold_seed": args.fold_seed,
            "k": args.k,
            "grade_threshold": args.grade_threshold,
        },
    )
    for fold, (v, t) in enumerate(zip(report.fold_val_f1, report.fold_test_f1)):
        log(f"fold {fold}: val {v:.4f} test {t:.4f}")
    log(f"test macro-F1: {report.mean_test_f1:.4f} (+- {report.std_test_f1:.4f})")
    print(table, end="")
    return 0


def cmd_report(args) -> int:
    reports = [load_report(p) for p in args.reports]
    table = render_table(reports)
    svg = render_error_bar_svg(reports)
    out_dir = _prepare_out_dir(args.out, args.force)
    (out_dir / "table.txt").write_text(table, encoding="utf-8")
    (out_dir / "chart.svg").write_text(svg, encoding="utf-8")
    _write_runconfig(out_dir, "report", {"reports": [str(p) for p in args.reports]})
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="celldino", description=__doc__)
    parser.add_argument("--version", action="version", version=f"celldino {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-channel dataset")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--multi-label-p", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-distillation pretraining")
    p.add_argument("--config", help="JSON file with vit/dino/dataset/split_seed sections")
    p.add_argument("--dataset", help="manifest path (overrides config)")
    p.add_argument("--epochs", type=int, help="override dino.epochs")
    p.add_argument("--split-seed", type=int, dest="split_seed")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="extract frozen-backbone embeddings")
    p.add_argument("--backbone", required=True, help="dino or backbone checkpoint")
    p.add_argument("--dataset", required=True, help="manifest path")
    p.add_argument("--adapter", choices=["map", "replicate"], default="map")
    p.add_argument("--map", action="append", help='assignment like "protein:0" (repeatable)')
    p.add_argument("--dst-channels", type=int, dest="dst_channels")
    p.add_argument("--weights-label", dest="weights_label")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train-head", help="train a single classifier head")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON file with a 'head' section")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int, dest="split_seed", default=0)
    p.add_argument("--grade-threshold", type=int, dest="grade_threshold", default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("crossval", help="k-fold cross-validation over embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON file with a 'head' section")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int, dest="split_seed", default=0)
    p.add_argument("--fold-seed", type=int, dest="fold_seed", default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--grade-threshold", type=int, dest="grade_threshold", default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="side-by-side table and chart from CV reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UserError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - anything else is an internal error
        import traceback

        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
