"""Command-line entry point.

One executable, one subcommand per pipeline stage:

  prepare   raw annotations -> curated manifest + curation report
  train     run config JSON -> checkpoint dir, history CSV, resolved config
  eval      checkpoint + manifest split -> evaluation report JSON
  score     checkpoint + image files -> per-image JSON lines
  stats     manifest + backend -> dataset statistics CSV + 2-D projection
  anchors   anchor layout -> box dump or count
  report    evaluation report JSONs -> comparison table

Exit codes: 0 success, 1 usage or config error, 2 data or validation
error, 3 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .anchors import (
    AnchorConfig,
    PRESET_COUNTS,
    default_anchor_config,
    generate_anchors,
    load_anchor_config,
    preset_anchor_config,
)
from .data import (
    DatasetManifest,
    blur_scores_for,
    consensus_filter,
    filter_blurred,
    load_annotations,
    load_image,
    load_manifest,
    save_manifest,
    split_subject_counts,
    subject_disjoint_split,
)
from .encoder import load_backend
from .errors import ConfigError, DataError, RaffnetError
from .evaluation import (
    dataset_stats,
    embed_2d,
    evaluate,
    load_report,
    render_report,
    save_report,
)
from .fecal import DEFAULT_PROMPTS
from .fusion import predict
from .model import ModelConfig, build_model
from .training import (
    PRESET_FECAL_ENABLED,
    TrainConfig,
    configure_trainability,
    history_csv,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
)
from .utils import canonical_json


class _Parser(argparse.ArgumentParser):
    """Usage problems become ConfigError so they map to exit code 1."""

    def error(self, message: str):
        raise ConfigError(message)


# -- run configuration ------------------------------------------------------

_RUN_KEYS = {"manifest", "output_dir", "seed", "model", "train"}
_MODEL_KEYS = {"backend", "anchors", "prompts", "aggregate", "topk", "share_fecal_backbone"}


@dataclass
class RunConfig:
    """Everything one training run needs, resolved to concrete objects."""

    manifest_path: Path
    output_dir: Path
    seed: int
    model: ModelConfig
    train: TrainConfig


def _resolve_anchor_field(value, base: Path) -> AnchorConfig:
    if value is None:
        return default_anchor_config()
    if isinstance(value, bool):
        raise ConfigError(f"anchors must be a preset count or a path, got {value!r}")
    if isinstance(value, int):
        return preset_anchor_config(value)
    if isinstance(value, str):
        p = Path(value)
        if not p.is_absolute():
            p = base / p
        return load_anchor_config(p)
    raise ConfigError(f"anchors must be a preset count or a path, got {value!r}")


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a run config JSON file.

    Relative paths inside the file resolve against the file's directory.
    The top-level seed feeds both model initialization and the training
    schedule so one value pins the whole run.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"run config not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    unknown = set(obj) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown run config keys: {sorted(unknown)}")
    for key in ("manifest", "output_dir"):
        if key not in obj or not isinstance(obj[key], str):
            raise ConfigError(f"{path}: run config needs a string {key!r} entry")

    base = path.parent
    manifest_path = Path(obj["manifest"])
    if not manifest_path.is_absolute():
        manifest_path = base / manifest_path
    output_dir = Path(obj["output_dir"])
    if not output_dir.is_absolute():
        output_dir = base / output_dir
    seed = obj.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"{path}: seed must be an integer, got {seed!r}")

    train_obj = obj.get("train", {})
    if not isinstance(train_obj, dict):
        raise ConfigError(f"{path}: train section must be a JSON object")
    train_obj = dict(train_obj)
    train_obj.setdefault("seed", seed)
    train_cfg = TrainConfig.from_dict(train_obj)

    model_obj = obj.get("model", {})
    if not isinstance(model_obj, dict):
        raise ConfigError(f"{path}: model section must be a JSON object")
    unknown = set(model_obj) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown model config keys: {sorted(unknown)}")
    prompts = model_obj.get("prompts")
    if prompts is not None:
        if (not isinstance(prompts, list) or not prompts
                or any(not isinstance(p, str) for p in prompts)):
            raise ConfigError(f"{path}: prompts must be a non-empty list of strings")

    model_cfg = ModelConfig(
        backend=model_obj.get("backend", "toy-vit-d16"),
        anchors=_resolve_anchor_field(model_obj.get("anchors"), base),
        prompts=tuple(prompts) if prompts is not None else DEFAULT_PROMPTS,
        aggregate=model_obj.get("aggregate", "max"),
        topk=model_obj.get("topk"),
        fecal_enabled=PRESET_FECAL_ENABLED[train_cfg.preset],
        share_fecal_backbone=bool(model_obj.get("share_fecal_backbone", True)),
        fecal_backbone_frozen=train_cfg.freeze.fecal_backbone,
        seed=seed,
    )
    return RunConfig(manifest_path=manifest_path, output_dir=output_dir, seed=seed,
                     model=model_cfg, train=train_cfg)


# -- subcommands -------------------------------------------------------------

def cmd_prepare(args: argparse.Namespace) -> int:
    records = load_annotations(args.annotations)
    root = Path(args.image_root) if args.image_root else Path(args.annotations).parent
    if args.blur_threshold < 0:
        raise ConfigError(f"--blur-threshold must be >= 0, got {args.blur_threshold}")
    ratios = tuple(args.ratios)

    kept, dropped = consensus_filter(records)
    borderline: list[dict] = []
    if args.blur_threshold > 0:
        scores = blur_scores_for(kept, root)
        sharp = filter_blurred(kept, args.blur_threshold, scores=scores)
        for sample, score in zip(kept, scores):
            if abs(score - args.blur_threshold) <= 0.1 * args.blur_threshold:
                borderline.append({"image_id": sample.image_id, "blur_score": score})
    else:
        sharp = list(kept)
    dropped_blur = len(kept) - len(sharp)

    manifest = DatasetManifest(samples=sharp, root=root,
                               provenance=Path(args.annotations).name)
    manifest = subject_disjoint_split(manifest, ratios, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out)

    report = {
        "annotations": len(records),
        "dropped_consensus": len(dropped),
        "dropped_blur": dropped_blur,
        "retained": len(manifest.samples),
        "per_class_counts": list(manifest.per_class_counts),
        "split_subject_counts": split_subject_counts(manifest),
        "blur_threshold": args.blur_threshold,
        "borderline_blur": borderline,
        "split_ratios": list(ratios),
        "seed": args.seed,
    }
    report_path = Path(str(out) + ".report.json")
    report_path.write_text(canonical_json(report) + "\n", encoding="utf-8")
    print(f"retained {len(manifest.samples)} of {len(records)} records "
          f"(dropped_consensus: {len(dropped)}, dropped_blur: {dropped_blur})")
    print(f"manifest: {out}")
    print(f"curation report: {report_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    rc = load_run_config(args.config)
    output_dir = Path(args.out) if args.out else rc.output_dir
    manifest = load_manifest(rc.manifest_path)

    model = build_model(rc.model)
    configure_trainability(model, rc.train)
    best, history = train(manifest, model, rc.train)

    output_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, output_dir / "checkpoint")
    (output_dir / "history.csv").write_text(history_csv(history), encoding="utf-8")
    resolved = {
        "manifest": str(rc.manifest_path),
        "output_dir": str(output_dir),
        "seed": rc.seed,
        "model": rc.model.to_meta(model.embed_dim, model.native_input),
        "train": rc.train.to_dict(),
    }
    (output_dir / "config.json").write_text(canonical_json(resolved) + "\n", encoding="utf-8")
    log_lines = [
        f"epoch {row['epoch']:>4}  train_loss {row['train_loss']:.6f}"
        f"  val_macro {row['val_accuracy'] * 100.0:.4f}"
        for row in history
    ]
    log_lines.append(f"best epoch {best.epoch}  val_macro {best.val_accuracy * 100.0:.4f}")
    (output_dir / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(log_lines[-1])
    print(f"checkpoint: {output_dir / 'checkpoint'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    manifest = load_manifest(args.manifest)
    report = evaluate(model, manifest, split=args.split, batch_size=args.batch_size)
    if args.out:
        save_report(report, args.out)
        print(f"split {args.split}: macro {report.macro_avg:.2f} over {report.n} images")
        print(f"report: {args.out}")
    else:
        print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    boxes = model.anchor_boxes
    lines = []
    with torch.no_grad():
        for image_path in args.images:
            raster = load_image(image_path)
            out = model.forward_images([raster])
            logits = np.asarray(out.logits[0].detach().cpu().numpy(), dtype=np.float64)
            record: dict = {
                "image": str(image_path),
                "predicted": predict(logits),
                "logits": [float(v) for v in logits],
            }
            if out.alpha is not None:
                record["alpha_mean"] = float(out.alpha[0].mean())
                scores = np.asarray(out.z_f[0].detach().cpu().numpy(), dtype=np.float64)
                order = np.argsort(-scores, kind="stable")[:5]
                record["top_anchors"] = [
                    {
                        "index": int(i),
                        "score": float(scores[i]),
                        "cx": boxes[i].cx,
                        "cy": boxes[i].cy,
                        "w": boxes[i].w,
                        "h": boxes[i].h,
                    }
                    for i in order
                ]
                if args.explain:
                    record["anchor_scores"] = [float(v) for v in scores]
            else:
                record["alpha_mean"] = None
                record["top_anchors"] = []
            lines.append(json.dumps(record, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"scored {len(lines)} images -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    if args.split != "all":
        manifest = DatasetManifest(samples=manifest.split_samples(args.split),
                                   root=manifest.root, provenance=manifest.provenance)
    backend = load_backend(args.backend)
    stats, features, labels, ids = dataset_stats(manifest, backend,
                                                 inter_mode=args.inter_mode)
    n_images = sum(stats.per_class_counts)
    header = "n_images,n_subjects,bbps0,bbps1,bbps2,bbps3,intra_dist,inter_dist"
    row = (f"{n_images},{stats.n_subjects},"
           + ",".join(str(c) for c in stats.per_class_counts)
           + f",{stats.intra_dist:.6f},{stats.inter_dist:.6f}")
    csv_text = header + "\n" + row + "\n"
    if args.out_csv:
        Path(args.out_csv).write_text(csv_text, encoding="utf-8")
        print(f"stats: {args.out_csv}")
    else:
        sys.stdout.write(csv_text)
    if args.out_points:
        points = embed_2d(features)
        lines = ["image_id,label,x,y"]
        for image_id, label, (x, y) in zip(ids, labels, points):
            lines.append(f"{image_id},{int(label)},{x:.6f},{y:.6f}")
        Path(args.out_points).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"projection: {args.out_points}")
    return 0


def cmd_anchors(args: argparse.Namespace) -> int:
    if args.config is not None and args.preset is not None:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config is not None:
        cfg = load_anchor_config(args.config)
    elif args.preset is not None:
        cfg = preset_anchor_config(args.preset)
    else:
        cfg = default_anchor_config()
    boxes = generate_anchors(cfg)
    if args.action == "count":
        print(len(boxes))
        return 0
    for i, b in enumerate(boxes):
        print(json.dumps({"index": i, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = [(Path(p).stem, load_report(p)) for p in args.reports]
    text = render_report(reports, fmt=args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report table: {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# -- parser wiring ------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="raffnet",
                     description="Region-aware feature fusion bowel-prep scoring pipeline")
    parser.add_argument("--threads", type=int, default=1,
                        help="torch intra-op threads (default 1, the reproducible setting)")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("prepare", parents=[], help="curate raw annotations into a manifest")
    p.add_argument("--annotations", required=True, help="JSON Lines annotation file")
    p.add_argument("--out", required=True, help="manifest output path")
    p.add_argument("--image-root", default=None,
                   help="directory image paths resolve against (default: annotation dir)")
    p.add_argument("--blur-threshold", type=float, default=0.0,
                   help="drop images with blur score below this (0 disables)")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.15, 0.15),
                   metavar=("TRAIN", "VAL", "TEST"), help="subject split ratios")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a run config JSON")
    p.add_argument("--config", required=True, help="run config JSON path")
    p.add_argument("--out", default=None, help="override the config's output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", default=None, help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score image files with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("images", nargs="+", metavar="IMAGE")
    p.add_argument("--explain", action="store_true",
                   help="include the full per-anchor score vector")
    p.add_argument("--out", default=None, help="write JSON lines here instead of stdout")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("stats", help="embedding statistics for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", default="toy-vit-d16")
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--inter-mode", default="centroid", choices=["centroid", "between"])
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-points", default=None,
                   help="write the 2-D projection CSV here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("anchors", help="dump or count an anchor layout")
    p.add_argument("action", choices=["dump", "count"])
    p.add_argument("--config", default=None, help="anchor layout JSON path")
    p.add_argument("--preset", type=int, default=None,
                   help=f"built-in layout size, one of {list(PRESET_COUNTS)}")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("report", help="render evaluation reports as a table")
    p.add_argument("reports", nargs="+", metavar="REPORT_JSON")
    p.add_argument("--format", default="markdown", choices=["markdown", "csv", "json"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return 1
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        torch.set_num_threads(args.threads)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    except RaffnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
