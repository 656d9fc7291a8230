"""Command-line entry points.

Every command takes the same configuration options: ``--preset`` picks the
defaults, ``--config`` overlays a YAML file and ``--set section.key=value``
overlays individual values (flags > file > defaults). Artifacts embed the
config hash; commands that read checkpoints refuse ones written under a
different configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .backbone import FEATURE_DIM, ResNetBackbone
from .baselines import KINDS, ROI_KINDS, AttentionMIL, MILCoreModel, ROIClassifier, predict_baseline, train_baseline
from .config import PRESETS, ConfigMismatchError, RunConfig, override_dict
from .containers import FORMAT_VERSION, FormatError, load_rf
from .evaluation import UndefinedMetricError, compute_metrics, format_summary_table, multi_run_summary
from .pipeline import (
    SPLITS,
    assign_splits,
    build_core_model,
    load_bundle,
    load_core_samples,
    prepare_bags,
    read_splits,
    run_pretrain,
    run_stage2,
    save_bundle,
    write_splits,
)
from .relevancy import CLASSES, map_to_image, roi_relevance, save_heatmap_png, write_relevance_csv
from .ssl import write_log
from .synth import generate_dataset, read_manifest
from .transformer import predict_cores

log = logging.getLogger("trusformer")

STAGE1, STAGE2, BASELINE = "stage1", "stage2", "baseline"


class CLIError(RuntimeError):
    """User-facing failure; reported without a traceback."""


# -- configuration ---------------------------------------------------------------


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args) -> RunConfig:
    d = PRESETS[args.preset]().to_dict()
    if args.config is not None:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise CLIError(f"{args.config}: expected a mapping of config sections")
        d = _merge(d, loaded)
    cfg = RunConfig.from_dict(override_dict(d, args.set or []))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _splits(data_dir: Path) -> dict[str, list[dict]]:
    if not (data_dir / "splits.csv").exists():
        raise CLIError(f"{data_dir} has no splits.csv; run `preprocess` first")
    return read_splits(data_dir)


def _cores(data_dir: Path, rows: list[dict], what: str):
    if not rows:
        raise CLIError(f"split {what!r} is empty")
    missing = [r["core_id"] for r in rows if not (data_dir / "bags" / f"{r['core_id']}.npz").exists()]
    if missing:
        raise CLIError(f"missing bags for {len(missing)} cores (e.g. {missing[0]}); run `preprocess` first")
    return load_core_samples(data_dir, rows)


def _load_model(bundle: dict):
    cfg: RunConfig = bundle["run_config"]
    if bundle["kind"] == STAGE2:
        model = build_core_model(cfg)
        model.load_state_dict(bundle["state"])
        return model
    if bundle["kind"] == BASELINE:
        kind = bundle["baseline_kind"]
        backbone = ResNetBackbone(cfg.backbone)
        if kind in ROI_KINDS:
            model = ROIClassifier(backbone)
        else:
            model = MILCoreModel(backbone, AttentionMIL(FEATURE_DIM, cfg.baseline.mil_hidden, gated=kind == "gated_attention_mil"))
        model.load_state_dict(bundle["state"])
        return model
    raise CLIError(f"a {bundle['kind']!r} checkpoint cannot score cores")


def _method(bundle: dict) -> str:
    return "trusformer" if bundle["kind"] == STAGE2 else bundle["baseline_kind"]


# -- commands --------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> None:
    s = cfg.synth
    out = Path(args.out)
    generate_dataset(s.n_patients, s.cores_per_patient, s.cancer_rate, s.phantom, cfg.seed, out, cfg.roi)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    print(f"wrote {s.n_patients * s.cores_per_patient} cores to {out} (config {cfg.hash()})")


def cmd_preprocess(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    if not (data / "manifest.csv").exists():
        raise CLIError(f"{data} has no manifest.csv")
    rows = read_manifest(data / "manifest.csv")
    prepare_bags(data, cfg, rows)
    splits = assign_splits(rows, cfg, fold=args.fold)
    write_splits(data / "splits.csv", splits, cfg.hash())
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))


def cmd_pretrain(args, cfg: RunConfig) -> None:
    data, out = Path(args.data), Path(args.out)
    splits = _splits(data)
    train = _cores(data, splits["train"], "train")
    val = load_core_samples(data, splits["val"]) if splits["val"] else []
    result, backbone, projector = run_pretrain(cfg, train, val, cfg.seed, out_dir=out / "epochs")
    write_log(out / "train_log.csv", result.log_rows)
    save_bundle(
        out / "stage1.pt",
        STAGE1,
        cfg,
        {"backbone": backbone.state_dict(), "projector": projector.state_dict()},
        seed=cfg.seed,
        best_epoch=result.best_epoch,
        best_auroc=result.best_auroc,
        history=result.history,
    )
    print(f"stage1 best epoch {result.best_epoch} probe AUROC {result.best_auroc} -> {out / 'stage1.pt'}")


def cmd_train(args, cfg: RunConfig) -> None:
    data, out = Path(args.data), Path(args.out)
    splits = _splits(data)
    train = _cores(data, splits["train"], "train")
    val = load_core_samples(data, splits["val"]) if splits["val"] else []
    stage1 = None
    if args.stage1 is not None:
        stage1 = load_bundle(args.stage1, cfg, STAGE1)["state"]["backbone"]

    if args.baseline is not None:
        if args.resume is not None:
            raise CLIError("--resume applies to the transformer run only")
        res = train_baseline(
            args.baseline, train, val, cfg.baseline, backbone_config=cfg.backbone, stage1_backbone=stage1, seed=cfg.seed
        )
        path = out / f"baseline_{args.baseline}.pt"
        save_bundle(
            path, BASELINE, cfg, res.best_state, seed=cfg.seed, baseline_kind=args.baseline,
            best_epoch=res.best_epoch, best_auroc=res.best_auroc, history=res.history,
        )
        print(f"{args.baseline} best epoch {res.best_epoch} val AUROC {res.best_auroc} -> {path}")
        return

    resume = None
    if args.resume is not None:
        resume = torch.load(args.resume, map_location="cpu", weights_only=False)
        if resume.get("config_hash") != cfg.hash():
            raise ConfigMismatchError(f"{args.resume} was produced with config {resume.get('config_hash')}, not {cfg.hash()}")
        if resume.get("seed") != cfg.seed:
            raise ConfigMismatchError(f"{args.resume} was produced with seed {resume.get('seed')}, not {cfg.seed}")
    elif stage1 is None:
        raise CLIError("--stage1 checkpoint is required (or --resume)")
    result, model = run_stage2(cfg, stage1, train, val, cfg.seed, out_dir=out / "epochs", resume=resume, max_epochs=args.max_epochs)
    save_bundle(
        out / "stage2.pt", STAGE2, cfg, model.state_dict(), seed=cfg.seed,
        best_epoch=result.best_epoch, best_auroc=result.best_auroc, history=result.history,
    )
    print(f"stage2 best epoch {result.best_epoch} val AUROC {result.best_auroc} -> {out / 'stage2.pt'}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    splits = _splits(data)
    if args.split not in splits:
        raise CLIError(f"unknown split {args.split!r}")
    cores = _cores(data, splits[args.split], args.split)
    labels = [c.label for c in cores]
    records, by_method = [], defaultdict(list)
    for path in args.checkpoint:
        bundle = load_bundle(path, cfg)
        model = _load_model(bundle)
        if bundle["kind"] == STAGE2:
            scores = predict_cores(model, cores)
        else:
            scores = predict_baseline(bundle["baseline_kind"], model, cores)
        report = compute_metrics(scores, labels, args.threshold)
        method = _method(bundle)
        by_method[method].append(report)
        records.append(
            {
                "format_version": FORMAT_VERSION,
                "config_hash": cfg.hash(),
                "method": method,
                "seed": bundle.get("seed"),
                "split": args.split,
                "checkpoint": str(path),
                **report.as_dict(),
            }
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    for r in records:
        print(f"{r['method']}\tseed={r['seed']}\t" + "\t".join(f"{k}={r[k]:.4f}" for k in ("auroc", "average_precision", "sensitivity", "specificity")))
    if all(len(v) >= 2 for v in by_method.values()):
        summary, p_values = multi_run_summary(by_method)
        table = format_summary_table(summary)
        lines = [f"# format_version={FORMAT_VERSION}", f"# config_hash={cfg.hash()}", table]
        lines += [f"# p({a} vs {b}, auroc) = {p:.4g}" for (a, b), p in p_values.items()]
        (out / "summary.tsv").write_text("\n".join(lines) + "\n")
        print(table)
        for (a, b), p in p_values.items():
            print(f"p({a} vs {b}) = {p:.4g}")


def cmd_explain(args, cfg: RunConfig) -> None:
    data, out = Path(args.data), Path(args.out)
    bundle = load_bundle(args.checkpoint, cfg, STAGE2)
    model = _load_model(bundle)
    rows = {r["core_id"]: r for r in read_manifest(data / "manifest.csv")}
    if args.core_id not in rows:
        raise CLIError(f"unknown core {args.core_id!r}")
    row = rows[args.core_id]
    (core,) = _cores(data, [row], args.core_id)
    image = load_rf(data / row["image_path"])
    classes = CLASSES if args.target_class is None else (args.target_class,)
    scores = {c: roi_relevance(model, core.rois, core.grid_index, c).scores for c in classes}
    out.mkdir(parents=True, exist_ok=True)
    empty = np.full(len(core.rois), np.nan)
    write_relevance_csv(
        out / f"{args.core_id}_relevance.csv", core.positions, scores.get("benign", empty), scores.get("cancer", empty)
    )
    for c, s in scores.items():
        heat = map_to_image(s, core.positions, image.shape, (image.depth_mm, image.width_mm), cfg.roi.roi_size_mm)
        save_heatmap_png(out / f"{args.core_id}_{c}.png", heat)
    print(f"explained {args.core_id} ({len(core.rois)} ROIs) -> {out}")


@torch.no_grad()
def cmd_export_features(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    bundle = load_bundle(args.checkpoint, cfg, STAGE2)
    model = _load_model(bundle).eval()
    splits = _splits(data)
    if args.split not in splits:
        raise CLIError(f"unknown split {args.split!r}")
    cores = _cores(data, splits[args.split], args.split)
    dim = cfg.transformer.dim
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        f.write(f"# format_version={FORMAT_VERSION}\n# config_hash={cfg.hash()}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["core_id", *(f"f{i:03d}" for i in range(dim)), "label", "gleason_surrogate"])
        for c in cores:
            pooled = model.forward_core(c.rois, c.grid_index).pooled.numpy()
            w.writerow([c.core_id, *(repr(float(v)) for v in pooled), c.meta["label"], c.meta["gleason_surrogate"]])
    print(f"wrote {len(cores)} x {dim} features to {out}")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "export-features": cmd_export_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default="default", help="built-in defaults")
    common.add_argument("--config", type=Path, help="YAML config overlaying the preset")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trusformer", description="Two-stage ROI/core classifier for RF ultrasound.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)

    s = sub.add_parser("preprocess", parents=[common], help="build ROI bags and splits.csv")
    s.add_argument("--data", required=True)
    s.add_argument("--fold", type=int, default=0, help="validation fold (split.mode=fold)")

    s = sub.add_parser("pretrain", parents=[common], help="Stage 1: self-supervised backbone")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="Stage 2: core classifier, or a baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stage1", help="Stage-1 checkpoint bundle")
    s.add_argument("--baseline", choices=KINDS, help="train this comparison method instead")
    s.add_argument("--resume", help="per-epoch checkpoint to continue from")
    s.add_argument("--max-epochs", type=int, help="stop after this many epochs (schedule unchanged)")

    s = sub.add_parser("evaluate", parents=[common], help="metrics for one or more checkpoints")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", nargs="+", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--threshold", type=float, default=0.5, help="cancer-probability threshold for sens/spec")
    s.add_argument("--out", required=True)

    s = sub.add_parser("explain", parents=[common], help="per-ROI relevance CSV and heatmaps for one core")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--core-id", required=True)
    s.add_argument("--class", dest="target_class", choices=CLASSES, help="default: both classes")
    s.add_argument("--out", required=True)

    s = sub.add_parser("export-features", parents=[common], help="pooled 256-d core features as CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (CLIError, ConfigMismatchError, FormatError, UndefinedMetricError, FileNotFoundError, ValueError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
