"""Stage 1: VICReg pretraining of the ROI backbone with online linear evaluation."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .backbone import Projector, ResNetBackbone
from .evaluation import UndefinedMetricError, auroc
from .preprocess import resize_roi
from .schedule import lr_lambda
from .vicreg import VICRegWeights, vicreg_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr", "total", "s", "v", "c"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop scale range must lie in (0, 1]")
        object.__setattr__(self, "crop_scale_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class SSLSchedule:
    epochs: int = 200
    batch_size: int = 64
    warmup_epochs: int = 10
    peak_lr: float = 1e-4
    eval_every: int = 5
    # ROIs drawn from the pool per epoch; None = the whole pool
    samples_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be < epochs")


def sample_crop_box(shape, scale_range, rng) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a same-aspect crop covering ``scale`` of the area."""
    h, w = shape
    scale = rng.uniform(*scale_range)
    ch = max(1, min(h, int(round(h * np.sqrt(scale)))))
    cw = max(1, min(w, int(round(w * np.sqrt(scale)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def _one_view(roi: np.ndarray, policy: AugmentationPolicy, rng) -> np.ndarray:
    top, left, ch, cw = sample_crop_box(roi.shape, policy.crop_scale_range, rng)
    view = resize_roi(roi[top : top + ch, left : left + cw], roi.shape)
    # axis 1 is lateral ("horizontal"), axis 0 axial ("vertical")
    if rng.random() < policy.horizontal_flip_prob:
        view = view[:, ::-1]
    if rng.random() < policy.vertical_flip_prob:
        view = view[::-1, :]
    return np.ascontiguousarray(view, dtype=np.float32)


def augment(roi: np.ndarray, policy: AugmentationPolicy, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of one ROI."""
    rng = np.random.default_rng(rng)
    return _one_view(roi, policy, rng), _one_view(roi, policy, rng)


@torch.no_grad()
def extract_features(backbone: torch.nn.Module, rois: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = backbone.training
    backbone.eval()
    out = [backbone(torch.from_numpy(np.asarray(rois[i : i + batch_size], dtype=np.float32))) for i in range(0, len(rois), batch_size)]
    backbone.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros((0, 512), np.float32)


def online_linear_eval(features, roi_labels, val_features, val_labels, seed: int = 0) -> float:
    """Validation AUROC of a logistic probe fitted on frozen features."""
    roi_labels = np.asarray(roi_labels).astype(int)
    if len(np.unique(roi_labels)) < 2:
        raise UndefinedMetricError("probe training labels contain a single class")
    scaler = StandardScaler().fit(features)
    probe = LogisticRegression(max_iter=2000, random_state=seed)
    probe.fit(scaler.transform(features), roi_labels)
    scores = probe.decision_function(scaler.transform(val_features))
    return auroc(scores, val_labels)


@dataclass
class SSLResult:
    history: list[dict] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_auroc: float | None = None
    best_state: dict | None = None

    @property
    def losses(self) -> list[float]:
        return [r["total"] for r in self.log_rows]


def select_best(history: list[dict]) -> dict | None:
    """Entry with the highest probe AUROC; ties go to the earliest epoch."""
    scored = [h for h in history if h.get("probe_auroc") is not None]
    if not scored:
        return None
    return max(scored, key=lambda h: (h["probe_auroc"], -h["epoch"]))


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def train_ssl(
    rois: np.ndarray,
    backbone: ResNetBackbone,
    projector: Projector,
    schedule: SSLSchedule = SSLSchedule(),
    policy: AugmentationPolicy = AugmentationPolicy(),
    weights: VICRegWeights = VICRegWeights(),
    *,
    probe_data: tuple | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
) -> SSLResult:
    """VICReg training over a pool of ROIs drawn across cores.

    ``probe_data`` is ``(train_rois, train_labels, val_rois, val_labels)`` for
    online evaluation every ``schedule.eval_every`` epochs and after the last
    epoch. Labels are weak ROI labels inherited from the core. Without probe
    data the last epoch is reported as best.
    """
    rois = np.asarray(rois, dtype=np.float32)
    n = len(rois)
    per_epoch = n if schedule.samples_per_epoch is None else min(n, schedule.samples_per_epoch)
    batch = min(schedule.batch_size, per_epoch)
    if batch < 2:
        raise ValueError("need at least 2 ROIs per batch")
    steps_per_epoch = per_epoch // batch

    params = list(backbone.parameters()) + list(projector.parameters())
    opt = torch.optim.Adam(params, lr=schedule.peak_lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(schedule.warmup_epochs, schedule.epochs, steps_per_epoch))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    result = SSLResult()
    step = 0
    for epoch in range(schedule.epochs):
        backbone.train()
        projector.train()
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)[:per_epoch]
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * batch : (b + 1) * batch]
            views = [augment(rois[i], policy, np.random.default_rng([seed, epoch, int(i)])) for i in idx]
            x1 = torch.from_numpy(np.stack([v[0] for v in views]))
            x2 = torch.from_numpy(np.stack([v[1] for v in views]))
            terms = vicreg_loss(projector(backbone(x1)), projector(backbone(x2)), weights)
            if not torch.isfinite(terms.total):
                raise TrainingDivergedError(
                    f"non-finite VICReg loss at epoch {epoch} step {step}: "
                    f"s={terms.invariance.item()} v={terms.variance.item()} c={terms.covariance.item()}"
                )
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            sched.step()
            row = dict(
                step=step,
                lr=lr,
                total=terms.total.item(),
                s=terms.invariance.item(),
                v=terms.variance.item(),
                c=terms.covariance.item(),
            )
            result.log_rows.append(row)
            epoch_losses.append(row["total"])
            step += 1

        entry = {"epoch": epoch, "loss": float(np.mean(epoch_losses)), "probe_auroc": None}
        last = epoch == schedule.epochs - 1
        if probe_data is not None and ((epoch + 1) % schedule.eval_every == 0 or last):
            tr_x, tr_y, va_x, va_y = probe_data
            entry["probe_auroc"] = online_linear_eval(
                extract_features(backbone, tr_x), tr_y, extract_features(backbone, va_x), va_y, seed=seed
            )
        result.history.append(entry)
        log.info("ssl epoch %d loss %.4f probe %s", epoch, entry["loss"], entry["probe_auroc"])

        state = {"backbone": backbone.state_dict(), "projector": projector.state_dict()}
        if out_dir is not None:
            ckpt = {"epoch": epoch, **state, "history": result.history, **(checkpoint_meta or {})}
            torch.save(ckpt, out_dir / f"epoch_{epoch:03d}.pt")
        best = select_best(result.history)
        if (best is not None and best["epoch"] == epoch) or (probe_data is None and last):
            result.best_epoch = epoch
            result.best_auroc = entry["probe_auroc"]
            result.best_state = copy.deepcopy(state)

    if out_dir is not None:
        write_log(out_dir / "train_log.csv", result.log_rows)
    return result
