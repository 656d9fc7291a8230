"""Glue between data on disk and the two training stages.

Dataset directory layout::

    manifest.csv        core metadata (ManifestRow schema)
    cores/<id>.npz      RF frames
    masks/<id>.npz      needle masks (+ synthetic ROI truth)
    bags/<id>.npz       preprocessed ROI bags (+ <id>_positions.csv)
    splits.csv          core_id -> train / val / test after selection
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch

from .backbone import Projector, ResNetBackbone
from .config import ConfigMismatchError, RunConfig
from .containers import FORMAT_VERSION, load_bag, load_mask, load_rf, save_bag
from .evaluation import make_splits, select_cores
from .preprocess import build_bag
from .ssl import SSLResult, train_ssl
from .synth import read_manifest
from .transformer import CoreClassifier, CoreSample, CoreTransformer, Stage2Result, finetune

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def prepare_bags(data_dir, cfg: RunConfig, rows: list[dict] | None = None) -> None:
    data_dir = Path(data_dir)
    rows = read_manifest(data_dir / "manifest.csv") if rows is None else rows
    for r in rows:
        image = load_rf(data_dir / r["image_path"])
        mask, _ = load_mask(data_dir / r["mask_path"])
        save_bag(data_dir / "bags" / f"{r['core_id']}.npz", build_bag(image, mask, cfg.roi))


def assign_splits(rows: list[dict], cfg: RunConfig, fold: int = 0) -> dict[str, list[dict]]:
    """Patient-exclusive splits, then the selection policy within each split."""
    splits = make_splits(rows, cfg.split, fold=fold)
    out = {}
    for k, name in enumerate(SPLITS):
        part = splits[name]
        out[name] = select_cores(part, cfg.selection, rng=[cfg.split.seed, 100 + k]) if part else []
    return out


def write_splits(path, splits: dict[str, list[dict]], config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# format_version={FORMAT_VERSION}\n")
        if config_hash is not None:
            f.write(f"# config_hash={config_hash}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["core_id", "split"])
        for name in SPLITS:
            for r in splits[name]:
                w.writerow([r["core_id"], name])


def read_splits(data_dir) -> dict[str, list[dict]]:
    data_dir = Path(data_dir)
    rows = {r["core_id"]: r for r in read_manifest(data_dir / "manifest.csv")}
    out: dict[str, list[dict]] = {name: [] for name in SPLITS}
    with open(data_dir / "splits.csv", newline="") as f:
        for rec in csv.DictReader(line for line in f if not line.startswith("#")):
            out[rec["split"]].append(rows[rec["core_id"]])
    return out


def load_core_samples(data_dir, rows: list[dict]) -> list[CoreSample]:
    data_dir = Path(data_dir)
    cores = []
    for r in rows:
        bag = load_bag(data_dir / "bags" / f"{r['core_id']}.npz")
        cores.append(
            CoreSample(
                core_id=r["core_id"],
                rois=bag.as_array(),
                grid_index=np.asarray(bag.grid_index, dtype=np.int64),
                label=int(r["label"] == "cancer"),
                positions=np.asarray(bag.positions),
                meta=dict(r),
            )
        )
    return cores


def roi_subset(cores: list[CoreSample], per_core: int | None, seed) -> tuple[np.ndarray, np.ndarray]:
    """ROIs (and inherited weak labels) drawn from every core."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in cores:
        idx = np.arange(len(c.rois))
        if per_core is not None and per_core < len(idx):
            idx = np.sort(rng.choice(len(idx), per_core, replace=False))
        xs.append(c.rois[idx])
        ys.append(np.full(len(idx), c.label))
    return np.concatenate(xs), np.concatenate(ys)


def run_meta(cfg: RunConfig, seed: int) -> dict:
    return {"format_version": FORMAT_VERSION, "config_hash": cfg.hash(), "seed": seed}


def run_pretrain(cfg: RunConfig, train: list[CoreSample], val: list[CoreSample], seed: int, out_dir=None):
    """Stage 1; returns (SSLResult, backbone, projector) with the best weights loaded."""
    torch.manual_seed(seed)
    backbone = ResNetBackbone(cfg.backbone)
    projector = Projector(cfg.projector)
    pool, _ = roi_subset(train, cfg.ssl_rois_per_core, [seed, 1])
    probe = None
    if val and len({c.label for c in val}) == 2 and len({c.label for c in train}) == 2:
        tr_x, tr_y = roi_subset(train, cfg.probe_rois_per_core, [seed, 2])
        va_x, va_y = roi_subset(val, cfg.probe_rois_per_core, [seed, 3])
        probe = (tr_x, tr_y, va_x, va_y)
    result: SSLResult = train_ssl(
        pool,
        backbone,
        projector,
        cfg.ssl,
        cfg.augmentation,
        cfg.vicreg,
        probe_data=probe,
        seed=seed,
        out_dir=out_dir,
        checkpoint_meta=run_meta(cfg, seed),
    )
    backbone.load_state_dict(result.best_state["backbone"])
    projector.load_state_dict(result.best_state["projector"])
    return result, backbone, projector


def build_core_model(cfg: RunConfig, backbone_state: dict | None = None, seed: int = 0) -> CoreClassifier:
    torch.manual_seed(seed)
    backbone = ResNetBackbone(cfg.backbone)
    if backbone_state is not None:
        backbone.load_state_dict(backbone_state)
    return CoreClassifier(backbone, CoreTransformer(cfg.transformer))


def run_stage2(cfg: RunConfig, backbone_state, train, val, seed: int, out_dir=None, **kw):
    """Stage 2; returns (Stage2Result, model with best weights loaded)."""
    model = build_core_model(cfg, backbone_state, seed)
    kw.setdefault("checkpoint_meta", run_meta(cfg, seed))
    result: Stage2Result = finetune(model, train, val, cfg.stage2, seed=seed, out_dir=out_dir, **kw)
    model.load_state_dict(result.best_state)
    return result, model


# -- checkpoint bundles ----------------------------------------------------------


def save_bundle(path, kind: str, cfg: RunConfig, state: dict, **extra) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "state": state,
            **extra,
        },
        path,
    )


def load_bundle(path, cfg: RunConfig | None = None, kind: str | None = None) -> dict:
    """Load a checkpoint bundle, refusing one written under a different config."""
    bundle = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(bundle, dict) or "config_hash" not in bundle:
        raise ConfigMismatchError(f"{path} is not a checkpoint bundle")
    if bundle.get("format_version") != FORMAT_VERSION:
        raise ConfigMismatchError(f"{path}: unsupported format_version {bundle.get('format_version')}")
    stored = RunConfig.from_dict(bundle["config"])
    if stored.hash() != bundle["config_hash"]:
        raise ConfigMismatchError(f"{path}: embedded config does not match its hash")
    if cfg is not None and cfg.hash() != bundle["config_hash"]:
        raise ConfigMismatchError(f"{path} was produced with config {bundle['config_hash']}, not {cfg.hash()}")
    if kind is not None and bundle["kind"] != kind:
        raise ConfigMismatchError(f"{path} holds a {bundle['kind']!r} checkpoint, expected {kind!r}")
    bundle["run_config"] = stored
    return bundle
