"""Comparison methods: ROI-scale classifiers with mean aggregation and attention MIL."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FEATURE_DIM, BackboneConfig, ResNetBackbone
from .evaluation import auroc
from .schedule import lr_lambda
from .ssl import extract_features
from .transformer import CoreSample, TrainingDivergedError

log = logging.getLogger(__name__)

KINDS = ("supervised_roi", "ssl_linear", "ssl_finetune", "attention_mil", "gated_attention_mil")
ROI_KINDS = ("supervised_roi", "ssl_linear", "ssl_finetune")


def aggregate_mean(roi_probs) -> float:
    """Core cancer probability as the mean of ROI probabilities."""
    p = np.asarray(roi_probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("no ROI predictions to aggregate")
    return float(p.mean())


class ROIClassifier(nn.Module):
    def __init__(self, backbone: ResNetBackbone):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(FEATURE_DIM, 2)

    def forward(self, x):
        return self.head(self.backbone(x))


class AttentionMIL(nn.Module):
    """Attention pooling over instance features, optionally gated.

    a_i = softmax_i(w . tanh(V h_i))                      (plain)
    a_i = softmax_i(w . (tanh(V h_i) * sigmoid(U h_i)))   (gated)
    """

    def __init__(self, in_dim: int = FEATURE_DIM, hidden: int = 128, gated: bool = False, num_classes: int = 2):
        super().__init__()
        self.gated = gated
        self.V = nn.Linear(in_dim, hidden)
        self.U = nn.Linear(in_dim, hidden) if gated else None
        self.w = nn.Linear(hidden, 1)
        self.classifier = nn.Linear(in_dim, num_classes)

    def attention(self, h: torch.Tensor) -> torch.Tensor:
        e = torch.tanh(self.V(h))
        if self.gated:
            e = e * torch.sigmoid(self.U(h))
        return torch.softmax(self.w(e).squeeze(-1), dim=0)

    def forward(self, h: torch.Tensor):
        a = self.attention(h)
        return self.classifier(a @ h), a


def attention_mil_forward(features: torch.Tensor, params: AttentionMIL):
    """(core logits, instance weights) for one bag of features."""
    return params(features)


class MILCoreModel(nn.Module):
    def __init__(self, backbone: ResNetBackbone, head: AttentionMIL):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward_core(self, rois):
        return self.head(self.backbone(torch.as_tensor(np.asarray(rois, np.float32))))


@dataclass(frozen=True)
class BaselineSchedule:
    epochs: int = 70
    peak_lr: float = 1e-4
    warmup_epochs: int = 5
    batch_size: int = 64  # ROIs per step for ROI-scale kinds
    cores_per_batch: int = 8  # cores per step for MIL kinds
    mil_hidden: int = 128

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup must be shorter than training")


@dataclass
class BaselineResult:
    kind: str
    model: nn.Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_auroc: float | None = None
    best_state: dict | None = None


@torch.no_grad()
def predict_baseline(kind: str, model: nn.Module, cores: list[CoreSample]) -> np.ndarray:
    """Core-level cancer probability for each core."""
    was_training = model.training
    model.eval()
    out = []
    for c in cores:
        if kind in ROI_KINDS:
            probs = torch.softmax(model(torch.from_numpy(np.asarray(c.rois, np.float32))), dim=1)[:, 1]
            out.append(aggregate_mean(probs.numpy()))
        else:
            logits, _ = model.forward_core(c.rois)
            out.append(torch.softmax(logits, dim=-1)[1].item())
    model.train(was_training)
    return np.asarray(out)


def _record(result: BaselineResult, model, epoch, loss, val_cores):
    entry = {"epoch": epoch, "loss": loss, "val_auroc": None}
    labels = [c.label for c in val_cores]
    if len(set(labels)) == 2:
        entry["val_auroc"] = auroc(predict_baseline(result.kind, model, val_cores), labels)
    result.history.append(entry)
    log.info("%s epoch %d loss %.4f val auroc %s", result.kind, epoch, loss, entry["val_auroc"])
    score = entry["val_auroc"]
    if result.best_epoch is None or (score is None and result.best_auroc is None) or (
        score is not None and (result.best_auroc is None or score > result.best_auroc)
    ):
        result.best_epoch, result.best_auroc = epoch, score
        result.best_state = copy.deepcopy(model.state_dict())


def _train_roi(kind, model: ROIClassifier, train_cores, val_cores, schedule, seed) -> BaselineResult:
    result = BaselineResult(kind, model)
    rois = np.concatenate([c.rois for c in train_cores]).astype(np.float32)
    labels = np.concatenate([np.full(len(c.rois), c.label) for c in train_cores])
    frozen = kind == "ssl_linear"
    if frozen:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        model.backbone.eval()
        inputs = torch.from_numpy(extract_features(model.backbone, rois))
        params = list(model.head.parameters())
    else:
        inputs = torch.from_numpy(rois)
        params = list(model.parameters())
    n = len(labels)
    batch = min(schedule.batch_size, n)
    steps = math.ceil(n / batch)
    opt = torch.optim.Adam(params, lr=schedule.peak_lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(schedule.warmup_epochs, schedule.epochs, steps))
    y_all = torch.from_numpy(labels.astype(np.int64))
    for epoch in range(schedule.epochs):
        model.head.train()
        if not frozen:
            model.backbone.train()
        order = np.random.default_rng([seed, epoch]).permutation(n)
        losses = []
        for b in range(steps):
            idx = torch.from_numpy(order[b * batch : (b + 1) * batch])
            x = inputs[idx]
            logits = model.head(x) if frozen else model(x)
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{kind}: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        _record(result, model, epoch, float(np.mean(losses)), val_cores)
    return result


def _train_mil(kind, model: MILCoreModel, train_cores, val_cores, schedule, seed) -> BaselineResult:
    result = BaselineResult(kind, model)
    steps = math.ceil(len(train_cores) / schedule.cores_per_batch)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.peak_lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(schedule.warmup_epochs, schedule.epochs, steps))
    for epoch in range(schedule.epochs):
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(train_cores))
        losses = []
        for b in range(steps):
            batch = [train_cores[i] for i in order[b * schedule.cores_per_batch : (b + 1) * schedule.cores_per_batch]]
            sizes = [len(c.rois) for c in batch]
            feats = torch.split(model.backbone(torch.from_numpy(np.concatenate([c.rois for c in batch]))), sizes)
            logits = torch.stack([model.head(f)[0] for f in feats])
            loss = F.cross_entropy(logits, torch.tensor([c.label for c in batch]))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{kind}: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        _record(result, model, epoch, float(np.mean(losses)), val_cores)
    return result


def train_baseline(
    kind: str,
    train_cores: list[CoreSample],
    val_cores: list[CoreSample],
    schedule: BaselineSchedule = BaselineSchedule(),
    *,
    backbone_config: BackboneConfig = BackboneConfig(),
    stage1_backbone: dict | None = None,
    seed: int = 0,
) -> BaselineResult:
    """Train one comparison method; the best epoch is chosen on validation AUROC.

    ``ssl_linear`` and ``ssl_finetune`` start from ``stage1_backbone`` (a
    backbone state dict); ``ssl_linear`` keeps it frozen.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {KINDS}")
    torch.manual_seed(seed)
    backbone = ResNetBackbone(backbone_config)
    if kind in ("ssl_linear", "ssl_finetune"):
        if stage1_backbone is None:
            raise ValueError(f"{kind} needs a Stage-1 backbone checkpoint")
        backbone.load_state_dict(stage1_backbone)
    if kind in ROI_KINDS:
        return _train_roi(kind, ROIClassifier(backbone), train_cores, val_cores, schedule, seed)
    head = AttentionMIL(FEATURE_DIM, schedule.mil_hidden, gated=kind == "gated_attention_mil")
    return _train_mil(kind, MILCoreModel(backbone, head), train_cores, val_cores, schedule, seed)
